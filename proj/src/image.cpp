#include "histocase/image.hpp"

#include <algorithm>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "histocase/error.hpp"

namespace histocase {

Raster decode_raster(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) fail(ErrorKind::UnreadablePath, path.string());
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) fail(ErrorKind::DecodeFailure, path.string());
    if (img.depth() == CV_16U) {
        img.convertTo(img, CV_8U, 1.0 / 257.0);
    } else if (img.depth() != CV_8U) {
        fail(ErrorKind::DecodeFailure, path.string() + ": unsupported sample depth");
    }
    if (img.channels() == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
    if (img.channels() == 4) cv::cvtColor(img, img, cv::COLOR_BGRA2RGBA);

    Raster r{img.cols, img.rows, img.channels(), {}};
    r.pixels.resize(static_cast<std::size_t>(r.width) * r.height * r.channels);
    const std::size_t row_bytes = static_cast<std::size_t>(r.width) * r.channels;
    for (int y = 0; y < r.height; ++y) std::copy_n(img.ptr<std::uint8_t>(y), row_bytes, r.pixels.data() + y * row_bytes);
    return r;
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
    if (raster.channels != 1 && raster.channels != 3)
        fail(ErrorKind::ChannelMismatch, "write_png supports 1 or 3 channels");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    cv::Mat img(raster.height, raster.width, raster.channels == 3 ? CV_8UC3 : CV_8UC1,
                const_cast<std::uint8_t*>(raster.pixels.data()));
    cv::Mat out;
    if (raster.channels == 3) {
        cv::cvtColor(img, out, cv::COLOR_RGB2BGR);
    } else {
        out = img;
    }
    // Fixed compression level so repeated writes are byte-identical.
    if (!cv::imwrite(path.string(), out, {cv::IMWRITE_PNG_COMPRESSION, 6}))
        fail(ErrorKind::UnreadablePath, "cannot write " + path.string());
}

ImageTensor preprocess_raster(const Raster& raster, ImageSize target) {
    if (raster.channels != 3)
        fail(ErrorKind::ChannelMismatch, "expected 3 channels, got " + std::to_string(raster.channels));
    if (target.height <= 0 || target.width <= 0) fail(ErrorKind::InvalidArgument, "target size must be positive");
    if (raster.pixels.size() != static_cast<std::size_t>(raster.width) * raster.height * 3)
        fail(ErrorKind::DecodeFailure, "raster buffer does not match its shape");

    cv::Mat src(raster.height, raster.width, CV_8UC3, const_cast<std::uint8_t*>(raster.pixels.data()));
    cv::Mat scaled;
    src.convertTo(scaled, CV_64FC3, 1.0 / 255.0);
    cv::Mat resized;
    if (raster.height == target.height && raster.width == target.width) {
        resized = scaled;
    } else {
        cv::resize(scaled, resized, cv::Size(target.width, target.height), 0.0, 0.0, cv::INTER_LINEAR);
    }

    ImageTensor t{target.height, target.width, 3, {}};
    t.values.resize(static_cast<std::size_t>(t.height) * t.width * 3);
    for (int y = 0; y < t.height; ++y) {
        const auto* row = resized.ptr<double>(y);
        for (int i = 0; i < t.width * 3; ++i)
            t.values[static_cast<std::size_t>(y) * t.width * 3 + i] = std::clamp(row[i], 0.0, 1.0);
    }
    return t;
}

ImageTensor preprocess_image(const dataset::ImageRecord& record, ImageSize target) {
    try {
        return preprocess_raster(decode_raster(record.pixel_source), target);
    } catch (const Error& e) {
        throw e.with_context("image " + record.image_id);
    }
}

void ImageStore::insert(const std::string& image_id, ImageTensor tensor) {
    images_.insert_or_assign(image_id, std::move(tensor));
}

const ImageTensor& ImageStore::get(const std::string& image_id) const {
    auto it = images_.find(image_id);
    if (it == images_.end()) fail(ErrorKind::InvalidArgument, "image " + image_id + " is not in the store");
    return it->second;
}

ImageStore load_image_store(const dataset::Manifest& manifest, ImageSize target) {
    ImageStore store;
    for (const auto& r : manifest.records()) store.insert(r.image_id, preprocess_image(r, target));
    return store;
}

ImageStore load_image_store(const std::map<std::string, Raster>& rasters, ImageSize target) {
    ImageStore store;
    for (const auto& [id, raster] : rasters) store.insert(id, preprocess_raster(raster, target));
    return store;
}

}  // namespace histocase
