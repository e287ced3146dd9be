#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "histocase/dataset.hpp"

namespace histocase::casegen {

// One image per magnification, ascending magnification order, all sharing `label`.
struct Case {
    std::vector<std::string> images;
    std::string label;
    std::optional<std::string> patient_id;

    bool operator==(const Case&) const = default;
};

struct CaseSet {
    std::vector<Case> cases;
    std::uint64_t k = 0;
    std::uint64_t seed = 0;
    std::string manifest_fingerprint;

    bool operator==(const CaseSet&) const = default;
};

// Product over magnifications of |I(label, mag)|, saturating at UINT64_MAX.
// Throws EmptyCell when any factor is zero.
std::uint64_t count_distinct_combinations(const dataset::Manifest& manifest, const std::string& label);

// Balanced, duplicate-free random case set: k / |labels| cases per label, each built by
// drawing one image uniformly from every (label, magnification) cell and rejecting repeats.
CaseSet build_case_set(const dataset::Manifest& manifest, std::uint64_t k, std::uint64_t seed);

struct PatientIssue {
    std::string patient_id;
    std::vector<int> missing_magnifications;
};

struct PatientCaseSets {
    std::map<std::string, CaseSet> sets;
    std::map<std::string, bool> truncated;  // fewer combinations existed than requested
    std::vector<PatientIssue> skipped;      // PatientMissingMagnification
};

// Per-patient sets drawn only from that patient's images. Single label each, so the
// balance rule does not apply.
PatientCaseSets build_patient_case_sets(const dataset::Manifest& manifest, const std::vector<std::string>& patients,
                                        std::uint64_t k_per_patient, std::uint64_t seed);

// Same as above with an individual request per patient.
PatientCaseSets build_patient_case_sets(const dataset::Manifest& manifest,
                                        const std::map<std::string, std::uint64_t>& requests, std::uint64_t seed);

// Splits `total` as evenly as possible; the remainder goes to the earliest ids in sort order.
std::map<std::string, std::uint64_t> apportion(std::uint64_t total, std::vector<std::string> patients);

// Concatenation of per-patient sets in patient order.
CaseSet merge(const PatientCaseSets& sets, std::uint64_t seed, const std::string& manifest_fingerprint);

// Throws on any violated case invariant (labels, order, uniqueness).
void validate_case_set(const CaseSet& set, const dataset::Manifest& manifest, bool require_balance);

// JSON Lines: header {"k","seed","manifest_fingerprint"[,"run_fingerprint"]} then one case per line.
void write_case_set(const CaseSet& set, const std::filesystem::path& path, const std::string& run_fingerprint = {});
CaseSet read_case_set(const std::filesystem::path& path);

}  // namespace histocase::casegen
