#include "histocase/casegen.hpp"

#include <algorithm>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

#include "histocase/error.hpp"
#include "histocase/io.hpp"
#include "histocase/random.hpp"

namespace histocase::casegen {

using dataset::Manifest;

namespace {

constexpr std::uint64_t kRetryFactor = 100;

// Image ids per magnification (ascending), restricted to one label and optionally one patient.
using Cells = std::vector<std::vector<std::string>>;

Cells collect_cells(const Manifest& manifest, const std::string& label, const std::string* patient) {
    Cells cells(manifest.magnification_set().size());
    for (const auto& r : manifest.records()) {
        if (r.malignancy != label) continue;
        if (patient && r.patient_id != *patient) continue;
        cells[manifest.magnification_index(r.magnification)].push_back(r.image_id);
    }
    return cells;
}

std::uint64_t combinations(const Cells& cells) {
    std::uint64_t product = 1;
    for (const auto& cell : cells) {
        if (cell.empty()) return 0;
        const std::uint64_t n = cell.size();
        product = product > std::numeric_limits<std::uint64_t>::max() / n ? std::numeric_limits<std::uint64_t>::max()
                                                                           : product * n;
    }
    return product;
}

// Rejection sampling as in the case-initialization loop: draw a fresh combination each
// iteration and keep it only when unseen. Bounded by kRetryFactor * need draws.
std::vector<Case> sample_cases(const Cells& cells, std::uint64_t need, Rng& rng, const std::string& label,
                               const std::optional<std::string>& patient) {
    std::vector<Case> out;
    out.reserve(need);
    std::unordered_set<std::string> seen;
    const std::uint64_t cap = kRetryFactor * need;
    std::vector<std::uint32_t> pick(cells.size());
    for (std::uint64_t draws = 0; out.size() < need; ++draws) {
        if (draws >= cap)
            fail(ErrorKind::RetryCapExceeded, "label " + label + ": " + std::to_string(out.size()) + " of " +
                                                  std::to_string(need) + " cases after " + std::to_string(cap) +
                                                  " draws");
        for (std::size_t m = 0; m < cells.size(); ++m) pick[m] = static_cast<std::uint32_t>(rng.uniform_index(cells[m].size()));
        std::string key(reinterpret_cast<const char*>(pick.data()), pick.size() * sizeof(std::uint32_t));
        if (!seen.insert(std::move(key)).second) continue;
        Case c{{}, label, patient};
        c.images.reserve(cells.size());
        for (std::size_t m = 0; m < cells.size(); ++m) c.images.push_back(cells[m][pick[m]]);
        out.push_back(std::move(c));
    }
    return out;
}

// Every combination in mixed-radix order (last magnification fastest).
std::vector<Case> enumerate_cases(const Cells& cells, const std::string& label,
                                  const std::optional<std::string>& patient) {
    std::vector<Case> out;
    std::vector<std::size_t> idx(cells.size(), 0);
    while (true) {
        Case c{{}, label, patient};
        for (std::size_t m = 0; m < cells.size(); ++m) c.images.push_back(cells[m][idx[m]]);
        out.push_back(std::move(c));
        std::size_t m = cells.size();
        while (m > 0) {
            --m;
            if (++idx[m] < cells[m].size()) break;
            idx[m] = 0;
            if (m == 0) return out;
        }
        if (cells.empty()) return out;
    }
}

}  // namespace

std::uint64_t count_distinct_combinations(const Manifest& manifest, const std::string& label) {
    manifest.label_index(label);
    const auto cells = collect_cells(manifest, label, nullptr);
    for (std::size_t m = 0; m < cells.size(); ++m)
        if (cells[m].empty())
            fail(ErrorKind::EmptyCell, "label " + label + " has no images at magnification " +
                                           std::to_string(manifest.magnification_set()[m]));
    return combinations(cells);
}

CaseSet build_case_set(const Manifest& manifest, std::uint64_t k, std::uint64_t seed) {
    const auto& labels = manifest.label_set();
    if (k == 0) fail(ErrorKind::InvalidArgument, "k must be positive");
    if (labels.empty()) fail(ErrorKind::InvalidArgument, "manifest has no labels");
    if (k % labels.size() != 0)
        fail(ErrorKind::NotMultiple,
             "k=" + std::to_string(k) + " is not a multiple of " + std::to_string(labels.size()) + " labels");
    const std::uint64_t per_label = k / labels.size();

    // Feasibility for every label before any sampling.
    for (const auto& label : labels) {
        const auto available = count_distinct_combinations(manifest, label);
        if (available < per_label)
            fail(ErrorKind::InfeasibleK, "label " + label + " needs " + std::to_string(per_label) +
                                             " distinct cases but only " + std::to_string(available) + " exist");
    }

    CaseSet set{{}, k, seed, manifest.source_fingerprint()};
    set.cases.reserve(k);
    for (const auto& label : labels) {
        Rng rng(derive_seed(seed, "casegen/label/" + label));
        auto cases = sample_cases(collect_cells(manifest, label, nullptr), per_label, rng, label, std::nullopt);
        std::move(cases.begin(), cases.end(), std::back_inserter(set.cases));
    }
    return set;
}

PatientCaseSets build_patient_case_sets(const Manifest& manifest, const std::map<std::string, std::uint64_t>& requests,
                                        std::uint64_t seed) {
    PatientCaseSets result;
    const auto known = manifest.patients();
    for (const auto& [patient, k] : requests) {
        if (!std::binary_search(known.begin(), known.end(), patient))
            fail(ErrorKind::InvalidArgument, "patient " + patient + " is not in the manifest");
        const std::string label = manifest.patient_label(patient);
        const auto cells = collect_cells(manifest, label, &patient);

        PatientIssue issue{patient, {}};
        for (std::size_t m = 0; m < cells.size(); ++m)
            if (cells[m].empty()) issue.missing_magnifications.push_back(manifest.magnification_set()[m]);
        if (!issue.missing_magnifications.empty()) {
            result.skipped.push_back(std::move(issue));
            continue;
        }

        CaseSet set{{}, 0, seed, manifest.source_fingerprint()};
        const std::uint64_t available = combinations(cells);
        if (k == 0) {
            // nothing requested
        } else if (available <= k) {
            set.cases = enumerate_cases(cells, label, patient);
            result.truncated[patient] = available < k;
        } else {
            Rng rng(derive_seed(seed, "casegen/patient/" + patient));
            set.cases = sample_cases(cells, k, rng, label, patient);
            result.truncated[patient] = false;
        }
        set.k = set.cases.size();
        result.sets.emplace(patient, std::move(set));
    }
    return result;
}

PatientCaseSets build_patient_case_sets(const Manifest& manifest, const std::vector<std::string>& patients,
                                        std::uint64_t k_per_patient, std::uint64_t seed) {
    std::map<std::string, std::uint64_t> requests;
    for (const auto& p : patients) requests[p] = k_per_patient;
    return build_patient_case_sets(manifest, requests, seed);
}

std::map<std::string, std::uint64_t> apportion(std::uint64_t total, std::vector<std::string> patients) {
    std::sort(patients.begin(), patients.end());
    patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
    std::map<std::string, std::uint64_t> out;
    if (patients.empty()) return out;
    const std::uint64_t n = patients.size();
    for (std::uint64_t i = 0; i < n; ++i) out[patients[i]] = total / n + (i < total % n ? 1 : 0);
    return out;
}

CaseSet merge(const PatientCaseSets& sets, std::uint64_t seed, const std::string& manifest_fingerprint) {
    CaseSet out{{}, 0, seed, manifest_fingerprint};
    for (const auto& [patient, set] : sets.sets) out.cases.insert(out.cases.end(), set.cases.begin(), set.cases.end());
    out.k = out.cases.size();
    return out;
}

void validate_case_set(const CaseSet& set, const Manifest& manifest, bool require_balance) {
    const auto& mags = manifest.magnification_set();
    std::set<std::vector<std::string>> unique;
    std::map<std::string, std::uint64_t> per_label;
    for (std::size_t i = 0; i < set.cases.size(); ++i) {
        const auto& c = set.cases[i];
        const std::string where = "case " + std::to_string(i);
        if (c.images.size() != mags.size())
            fail(ErrorKind::ShapeMismatch, where + " has " + std::to_string(c.images.size()) + " images");
        for (std::size_t m = 0; m < c.images.size(); ++m) {
            const auto& r = manifest.find(c.images[m]);
            if (r.malignancy != c.label) fail(ErrorKind::UnknownLabel, where + ": image " + r.image_id + " label mismatch");
            if (r.magnification != mags[m]) fail(ErrorKind::ShapeMismatch, where + ": magnification order violated");
            if (c.patient_id && r.patient_id != *c.patient_id)
                fail(ErrorKind::InvalidArgument, where + ": image " + r.image_id + " belongs to another patient");
        }
        if (!unique.insert(c.images).second) fail(ErrorKind::InvalidArgument, where + " duplicates an earlier case");
        ++per_label[c.label];
    }
    if (require_balance) {
        if (set.cases.size() != set.k) fail(ErrorKind::InvalidArgument, "case count differs from k");
        const auto& labels = manifest.label_set();
        for (const auto& l : labels)
            if (per_label[l] * labels.size() != set.k) fail(ErrorKind::InvalidArgument, "label " + l + " is unbalanced");
    }
}

void write_case_set(const CaseSet& set, const std::filesystem::path& path, const std::string& run_fingerprint) {
    std::ostringstream ss;
    nlohmann::ordered_json header = {{"k", set.k}, {"seed", set.seed}, {"manifest_fingerprint", set.manifest_fingerprint}};
    if (!run_fingerprint.empty()) header["run_fingerprint"] = run_fingerprint;
    ss << header.dump() << '\n';
    for (const auto& c : set.cases) {
        nlohmann::ordered_json line = {{"label", c.label}};
        line["patient_id"] = c.patient_id ? nlohmann::ordered_json(*c.patient_id) : nlohmann::ordered_json(nullptr);
        line["images"] = c.images;
        ss << line.dump() << '\n';
    }
    io::write_text(path, ss.str());
}

CaseSet read_case_set(const std::filesystem::path& path) {
    std::istringstream in(io::read_text(path));
    std::string line;
    CaseSet set;
    try {
        if (!std::getline(in, line)) fail(ErrorKind::MalformedRecord, path.string() + " is empty");
        const auto header = nlohmann::json::parse(line);
        set.k = header.at("k").get<std::uint64_t>();
        set.seed = header.at("seed").get<std::uint64_t>();
        set.manifest_fingerprint = header.at("manifest_fingerprint").get<std::string>();
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            Case c;
            c.label = j.at("label").get<std::string>();
            if (!j.at("patient_id").is_null()) c.patient_id = j.at("patient_id").get<std::string>();
            c.images = j.at("images").get<std::vector<std::string>>();
            set.cases.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedRecord, path.string() + ": " + e.what());
    }
    return set;
}

}  // namespace histocase::casegen
