#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "histocase/dataset.hpp"

namespace histocase {

// 8-bit raster, rows top to bottom, channels interleaved (RGB for 3 channels).
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

// Real-valued image, HWC interleaved, intensities in [0, 1].
struct ImageTensor {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> values;

    double at(int y, int x, int c) const { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

struct ImageSize {
    int height = 100;
    int width = 100;
};

Raster decode_raster(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster& raster);

// Bilinear resize to `target` and scaling by 1/255. Requires a 3-channel raster.
ImageTensor preprocess_raster(const Raster& raster, ImageSize target);
ImageTensor preprocess_image(const dataset::ImageRecord& record, ImageSize target);

// Preprocessed tensors keyed by image_id.
class ImageStore {
public:
    void insert(const std::string& image_id, ImageTensor tensor);
    const ImageTensor& get(const std::string& image_id) const;
    bool contains(const std::string& image_id) const { return images_.contains(image_id); }
    std::size_t size() const { return images_.size(); }

private:
    std::map<std::string, ImageTensor> images_;
};

ImageStore load_image_store(const dataset::Manifest& manifest, ImageSize target);
ImageStore load_image_store(const std::map<std::string, Raster>& rasters, ImageSize target);

}  // namespace histocase
