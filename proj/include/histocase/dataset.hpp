#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace histocase::dataset {

struct ImageRecord {
    std::string image_id;
    std::string patient_id;
    std::string malignancy;
    int magnification = 0;
    std::string pixel_source;
    int native_width = 0;   // 0 when unknown until decode
    int native_height = 0;
};

// Declared label and magnification sets. Empty vectors mean "derive from the records".
struct ManifestSchema {
    std::vector<std::string> labels;
    std::vector<int> magnifications;
};

// Validated image catalog. Construction enforces unique image ids and
// membership of every record in the declared label/magnification sets.
class Manifest {
public:
    Manifest() = default;
    Manifest(std::vector<ImageRecord> records, const ManifestSchema& schema = {});

    const std::vector<ImageRecord>& records() const { return records_; }
    const std::vector<std::string>& label_set() const { return label_set_; }
    const std::vector<int>& magnification_set() const { return magnification_set_; }
    const std::string& source_fingerprint() const { return fingerprint_; }

    const ImageRecord& find(const std::string& image_id) const;
    bool contains(const std::string& image_id) const { return index_.contains(image_id); }
    std::size_t label_index(const std::string& label) const;
    std::size_t magnification_index(int magnification) const;

    // Sorted, unique.
    std::vector<std::string> patients() const;
    // Label of the patient's first record in image_id order.
    std::string patient_label(const std::string& patient_id) const;

    ManifestSchema schema() const { return {label_set_, magnification_set_}; }

private:
    std::vector<ImageRecord> records_;
    std::vector<std::string> label_set_;
    std::vector<int> magnification_set_;
    std::string fingerprint_;
    std::unordered_map<std::string, std::size_t> index_;
};

enum class ManifestFormat { Csv, BreakhisLayout };

ManifestFormat parse_manifest_format(const std::string& name);

Manifest load_manifest(const std::filesystem::path& path, ManifestFormat format, const ManifestSchema& declared = {});
void write_manifest_csv(const Manifest& manifest, const std::filesystem::path& path);
std::string manifest_csv(const Manifest& manifest);

// Patient identity from a BreaKHis file name such as "SOB_B_A-14-22549AB-40-001.png" -> "14-22549AB".
std::string breakhis_patient_id(const std::string& filename);

Manifest subset_patients(const Manifest& manifest, const std::vector<std::string>& patients);
Manifest restrict_magnifications(const Manifest& manifest, const std::vector<int>& magnifications);

struct FoldSplit {
    int fold_index = 1;
    std::vector<std::string> train_patients;  // sorted
    std::vector<std::string> test_patients;   // sorted
    std::uint64_t seed = 0;
};

// Patient-level random splits. The train count is round(train_fraction * patients);
// with `stratify` the per-label train counts are allotted by largest remainder so the
// total is unchanged.
std::vector<FoldSplit> split_folds(const Manifest& manifest, int n_folds, double train_fraction, std::uint64_t seed,
                                   bool stratify = true);

// Throws InvalidFoldFile unless train/test are disjoint and cover every patient of the manifest.
void validate_fold(const FoldSplit& fold, const Manifest& manifest);

std::vector<FoldSplit> load_fold_file(const std::filesystem::path& path, const Manifest& manifest);
void write_fold_file(const std::vector<FoldSplit>& folds, const std::filesystem::path& path);

}  // namespace histocase::dataset
