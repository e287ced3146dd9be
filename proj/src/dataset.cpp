#include "histocase/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "json.hpp"

#include "histocase/error.hpp"
#include "histocase/io.hpp"
#include "histocase/random.hpp"

namespace histocase::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string canonical_text(const std::vector<ImageRecord>& records, const std::vector<std::string>& labels,
                           const std::vector<int>& mags) {
    std::ostringstream ss;
    ss << "labels";
    for (const auto& l : labels) ss << '|' << l;
    ss << "\nmagnifications";
    for (int m : mags) ss << '|' << m;
    ss << '\n';
    // pixel_source is excluded so a relocated corpus keeps its fingerprint.
    for (const auto& r : records) {
        ss << r.image_id << '|' << r.patient_id << '|' << r.malignancy << '|' << r.magnification << '|'
           << r.native_width << '|' << r.native_height << '\n';
    }
    return ss.str();
}

}  // namespace

Manifest::Manifest(std::vector<ImageRecord> records, const ManifestSchema& schema) : records_(std::move(records)) {
    std::sort(records_.begin(), records_.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });

    if (schema.labels.empty()) {
        std::set<std::string> labels;
        for (const auto& r : records_) labels.insert(r.malignancy);
        label_set_.assign(labels.begin(), labels.end());
    } else {
        label_set_ = schema.labels;
        if (std::set<std::string>(label_set_.begin(), label_set_.end()).size() != label_set_.size())
            fail(ErrorKind::InvalidArgument, "declared label set has duplicates");
    }
    if (schema.magnifications.empty()) {
        std::set<int> mags;
        for (const auto& r : records_) mags.insert(r.magnification);
        magnification_set_.assign(mags.begin(), mags.end());
    } else {
        std::set<int> mags(schema.magnifications.begin(), schema.magnifications.end());
        if (mags.size() != schema.magnifications.size())
            fail(ErrorKind::InvalidArgument, "declared magnification set has duplicates");
        magnification_set_.assign(mags.begin(), mags.end());
    }
    for (int m : magnification_set_)
        if (m <= 0) fail(ErrorKind::UnknownLabel, "magnification must be positive, got " + std::to_string(m));

    for (std::size_t i = 0; i < records_.size(); ++i) {
        const auto& r = records_[i];
        if (r.image_id.empty()) fail(ErrorKind::MalformedRecord, "empty image_id");
        if (!index_.emplace(r.image_id, i).second) fail(ErrorKind::DuplicateImageId, r.image_id);
        if (std::find(label_set_.begin(), label_set_.end(), r.malignancy) == label_set_.end())
            fail(ErrorKind::UnknownLabel, "image " + r.image_id + " has label '" + r.malignancy + "'");
        if (!std::binary_search(magnification_set_.begin(), magnification_set_.end(), r.magnification))
            fail(ErrorKind::UnknownLabel,
                 "image " + r.image_id + " has magnification " + std::to_string(r.magnification));
    }
    fingerprint_ = io::hex64(fnv1a64(canonical_text(records_, label_set_, magnification_set_)));
}

const ImageRecord& Manifest::find(const std::string& image_id) const {
    auto it = index_.find(image_id);
    if (it == index_.end()) fail(ErrorKind::InvalidArgument, "unknown image_id " + image_id);
    return records_[it->second];
}

std::size_t Manifest::label_index(const std::string& label) const {
    auto it = std::find(label_set_.begin(), label_set_.end(), label);
    if (it == label_set_.end()) fail(ErrorKind::UnknownLabel, label);
    return static_cast<std::size_t>(it - label_set_.begin());
}

std::size_t Manifest::magnification_index(int magnification) const {
    auto it = std::lower_bound(magnification_set_.begin(), magnification_set_.end(), magnification);
    if (it == magnification_set_.end() || *it != magnification)
        fail(ErrorKind::UnknownLabel, "magnification " + std::to_string(magnification));
    return static_cast<std::size_t>(it - magnification_set_.begin());
}

std::vector<std::string> Manifest::patients() const {
    std::set<std::string> ids;
    for (const auto& r : records_) ids.insert(r.patient_id);
    return {ids.begin(), ids.end()};
}

std::string Manifest::patient_label(const std::string& patient_id) const {
    for (const auto& r : records_)
        if (r.patient_id == patient_id) return r.malignancy;
    fail(ErrorKind::InvalidArgument, "unknown patient " + patient_id);
}

ManifestFormat parse_manifest_format(const std::string& name) {
    if (name == "csv") return ManifestFormat::Csv;
    if (name == "breakhis_layout" || name == "breakhis") return ManifestFormat::BreakhisLayout;
    fail(ErrorKind::InvalidArgument, "unknown manifest format '" + name + "'");
}

namespace {

int parse_int(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::MalformedRecord, what + " is not an integer: '" + text + "'");
    }
}

Manifest load_csv(const fs::path& path, const ManifestSchema& declared) {
    if (!fs::is_regular_file(path)) fail(ErrorKind::UnreadablePath, path.string());
    std::istringstream in(io::read_text(path));
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::MissingColumn, "empty manifest " + path.string());
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

    const auto header = io::split_csv_line(line);
    auto column = [&](const std::string& name, bool required) -> int {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            if (required) fail(ErrorKind::MissingColumn, name);
            return -1;
        }
        return static_cast<int>(it - header.begin());
    };
    const int c_id = column("image_id", true);
    const int c_patient = column("patient_id", true);
    const int c_label = column("malignancy", true);
    const int c_mag = column("magnification", true);
    const int c_src = column("pixel_source", true);
    const int c_w = column("native_width", false);
    const int c_h = column("native_height", false);

    const fs::path base = path.parent_path();
    std::vector<ImageRecord> records;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = io::split_csv_line(line);
        if (f.size() < header.size())
            fail(ErrorKind::MalformedRecord, path.string() + ":" + std::to_string(line_no) + " has too few fields");
        ImageRecord r;
        r.image_id = f[c_id];
        r.patient_id = f[c_patient];
        r.malignancy = f[c_label];
        r.magnification = parse_int(f[c_mag], "magnification");
        fs::path src = f[c_src];
        if (src.is_relative() && !base.empty()) src = base / src;
        r.pixel_source = src.string();
        if (c_w >= 0 && !f[c_w].empty()) r.native_width = parse_int(f[c_w], "native_width");
        if (c_h >= 0 && !f[c_h].empty()) r.native_height = parse_int(f[c_h], "native_height");
        records.push_back(std::move(r));
    }
    return Manifest(std::move(records), declared);
}

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff" || ext == ".bmp" ||
           ext == ".ppm";
}

Manifest load_breakhis(const fs::path& root, const ManifestSchema& declared) {
    if (!fs::is_directory(root)) fail(ErrorKind::UnreadablePath, root.string());
    const std::vector<std::string> labels =
        declared.labels.empty() ? std::vector<std::string>{"benign", "malignant"} : declared.labels;
    static const std::regex mag_dir(R"(^(\d+)[xX]$)");

    std::vector<ImageRecord> records;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
        const fs::path rel = fs::relative(entry.path(), root);
        std::string label;
        int mag = 0;
        // The directory levels decide malignancy and magnification; the innermost match wins.
        for (auto it = rel.begin(); it != rel.end(); ++it) {
            if (std::next(it) == rel.end()) break;
            const std::string part = it->string();
            if (std::find(labels.begin(), labels.end(), part) != labels.end()) label = part;
            std::smatch m;
            if (std::regex_match(part, m, mag_dir)) mag = std::stoi(m[1].str());
        }
        if (label.empty() || mag == 0)
            fail(ErrorKind::MalformedRecord, "cannot place " + rel.string() + " under a malignancy/magnification directory");
        ImageRecord r;
        r.image_id = entry.path().stem().string();
        r.patient_id = breakhis_patient_id(entry.path().filename().string());
        r.malignancy = label;
        r.magnification = mag;
        r.pixel_source = entry.path().string();
        records.push_back(std::move(r));
    }
    ManifestSchema schema = declared;
    if (schema.labels.empty()) {
        std::set<std::string> present;
        for (const auto& r : records) present.insert(r.malignancy);
        for (const auto& l : labels)
            if (present.contains(l)) schema.labels.push_back(l);
    }
    return Manifest(std::move(records), schema);
}

}  // namespace

std::string breakhis_patient_id(const std::string& filename) {
    const std::string stem = fs::path(filename).stem().string();
    std::vector<std::string> parts;
    std::string cur;
    for (char c : stem) {
        if (c == '-') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    // <procedure>_<class>_<type>-<year>-<slide>-<magnification>-<sequence>
    if (parts.size() < 5 || parts[1].empty() || parts[2].empty())
        fail(ErrorKind::MalformedRecord, "unrecognized BreaKHis file name '" + filename + "'");
    return parts[1] + "-" + parts[2];
}

Manifest load_manifest(const fs::path& path, ManifestFormat format, const ManifestSchema& declared) {
    switch (format) {
        case ManifestFormat::Csv: return load_csv(path, declared);
        case ManifestFormat::BreakhisLayout: return load_breakhis(path, declared);
    }
    fail(ErrorKind::InvalidArgument, "unsupported manifest format");
}

std::string manifest_csv(const Manifest& manifest) {
    std::ostringstream ss;
    ss << "image_id,patient_id,malignancy,magnification,pixel_source,native_width,native_height\n";
    for (const auto& r : manifest.records()) {
        ss << io::csv_escape(r.image_id) << ',' << io::csv_escape(r.patient_id) << ',' << io::csv_escape(r.malignancy)
           << ',' << r.magnification << ',' << io::csv_escape(r.pixel_source) << ',' << r.native_width << ','
           << r.native_height << '\n';
    }
    return ss.str();
}

void write_manifest_csv(const Manifest& manifest, const fs::path& path) { io::write_text(path, manifest_csv(manifest)); }

Manifest subset_patients(const Manifest& manifest, const std::vector<std::string>& patients) {
    const std::set<std::string> keep(patients.begin(), patients.end());
    std::vector<ImageRecord> records;
    for (const auto& r : manifest.records())
        if (keep.contains(r.patient_id)) records.push_back(r);
    return Manifest(std::move(records), manifest.schema());
}

Manifest restrict_magnifications(const Manifest& manifest, const std::vector<int>& magnifications) {
    const std::set<int> keep(magnifications.begin(), magnifications.end());
    for (int m : keep) manifest.magnification_index(m);
    std::vector<ImageRecord> records;
    for (const auto& r : manifest.records())
        if (keep.contains(r.magnification)) records.push_back(r);
    return Manifest(std::move(records), {manifest.label_set(), {keep.begin(), keep.end()}});
}

std::vector<FoldSplit> split_folds(const Manifest& manifest, int n_folds, double train_fraction, std::uint64_t seed,
                                   bool stratify) {
    if (n_folds < 1) fail(ErrorKind::InvalidArgument, "n_folds must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        fail(ErrorKind::InvalidArgument, "train_fraction must lie in (0, 1)");
    const auto patients = manifest.patients();
    const auto total = static_cast<long>(patients.size());
    if (total < 2) fail(ErrorKind::TooFewPatients, "need at least 2 patients, have " + std::to_string(total));
    const long n_train = std::lround(train_fraction * static_cast<double>(total));
    if (n_train < 1 || n_train >= total)
        fail(ErrorKind::TooFewPatients, std::to_string(total) + " patients cannot be split at fraction " +
                                            std::to_string(train_fraction));

    // Patient groups in label_set order; a single group when not stratifying.
    std::vector<std::vector<std::string>> groups;
    if (stratify) {
        std::map<std::string, std::vector<std::string>> by_label;
        for (const auto& p : patients) by_label[manifest.patient_label(p)].push_back(p);
        for (const auto& l : manifest.label_set())
            if (by_label.contains(l)) groups.push_back(by_label[l]);
    } else {
        groups.push_back(patients);
    }

    // Largest-remainder allotment of the train count over groups.
    std::vector<long> quota(groups.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    long assigned = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double exact = static_cast<double>(n_train) * static_cast<double>(groups[g].size()) / total;
        quota[g] = static_cast<long>(std::floor(exact));
        assigned += quota[g];
        remainders.emplace_back(exact - static_cast<double>(quota[g]), g);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < n_train; ++i, ++assigned) ++quota[remainders[i % remainders.size()].second];

    std::vector<FoldSplit> folds;
    for (int f = 1; f <= n_folds; ++f) {
        Rng rng(derive_seed(seed, "split/fold/" + std::to_string(f)));
        FoldSplit split{f, {}, {}, seed};
        for (std::size_t g = 0; g < groups.size(); ++g) {
            auto members = groups[g];
            rng.shuffle(std::span<std::string>(members));
            for (std::size_t i = 0; i < members.size(); ++i)
                (static_cast<long>(i) < quota[g] ? split.train_patients : split.test_patients).push_back(members[i]);
        }
        std::sort(split.train_patients.begin(), split.train_patients.end());
        std::sort(split.test_patients.begin(), split.test_patients.end());
        folds.push_back(std::move(split));
    }
    return folds;
}

void validate_fold(const FoldSplit& fold, const Manifest& manifest) {
    const std::string where = "fold " + std::to_string(fold.fold_index);
    const std::set<std::string> train(fold.train_patients.begin(), fold.train_patients.end());
    const std::set<std::string> test(fold.test_patients.begin(), fold.test_patients.end());
    if (train.empty() || test.empty()) fail(ErrorKind::InvalidFoldFile, where + " has an empty side");
    for (const auto& p : test)
        if (train.contains(p)) fail(ErrorKind::InvalidFoldFile, where + ": patient " + p + " in train and test");
    const auto all = manifest.patients();
    for (const auto& p : all)
        if (!train.contains(p) && !test.contains(p))
            fail(ErrorKind::InvalidFoldFile, where + ": patient " + p + " is not assigned");
    if (train.size() + test.size() != all.size())
        fail(ErrorKind::InvalidFoldFile, where + " references patients absent from the manifest");
}

std::vector<FoldSplit> load_fold_file(const fs::path& path, const Manifest& manifest) {
    json doc;
    try {
        doc = json::parse(io::read_text(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::InvalidFoldFile, path.string() + ": " + e.what());
    }
    if (!doc.is_object() || doc.empty()) fail(ErrorKind::InvalidFoldFile, "expected a non-empty object");
    std::vector<FoldSplit> folds;
    for (const auto& [key, value] : doc.items()) {
        FoldSplit f;
        try {
            f.fold_index = std::stoi(key);
            f.train_patients = value.at("train").get<std::vector<std::string>>();
            f.test_patients = value.at("test").get<std::vector<std::string>>();
        } catch (const std::exception& e) {
            fail(ErrorKind::InvalidFoldFile, "fold '" + key + "': " + e.what());
        }
        if (f.fold_index < 1) fail(ErrorKind::InvalidFoldFile, "fold index must be >= 1");
        std::sort(f.train_patients.begin(), f.train_patients.end());
        std::sort(f.test_patients.begin(), f.test_patients.end());
        validate_fold(f, manifest);
        folds.push_back(std::move(f));
    }
    std::sort(folds.begin(), folds.end(), [](const auto& a, const auto& b) { return a.fold_index < b.fold_index; });
    return folds;
}

void write_fold_file(const std::vector<FoldSplit>& folds, const fs::path& path) {
    json doc = json::object();
    for (const auto& f : folds)
        doc[std::to_string(f.fold_index)] = {{"train", f.train_patients}, {"test", f.test_patients}};
    io::write_text(path, doc.dump(2) + "\n");
}

}  // namespace histocase::dataset
