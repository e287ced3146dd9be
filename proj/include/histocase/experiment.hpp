#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "histocase/casegen.hpp"
#include "histocase/dataset.hpp"
#include "histocase/image.hpp"
#include "histocase/metrics.hpp"
#include "histocase/model.hpp"
#include "histocase/synthetic.hpp"
#include "histocase/trainer.hpp"

namespace histocase::experiment {

enum class SourceKind { Synthetic, Csv, BreakhisLayout };

struct ManifestSource {
    SourceKind kind = SourceKind::Synthetic;
    std::filesystem::path path;           // csv file or BreaKHis root
    synthetic::SyntheticSpec synthetic;   // used when kind == Synthetic
    std::vector<int> magnifications;      // restrict to these; empty keeps all
};

struct FoldProtocol {
    int n_folds = 5;
    double train_fraction = 0.659;  // 54 of 82 patients
    bool stratify = true;
    std::filesystem::path file;  // external fold definitions; overrides the generated split
};

// Named sub-seeds derived from the master seed unless pinned in the config.
struct Seeds {
    std::uint64_t master = 0;
    std::optional<std::uint64_t> split;
    std::optional<std::uint64_t> casegen;
    std::optional<std::uint64_t> init;
    std::optional<std::uint64_t> shuffle;
};

struct ResolvedSeeds {
    std::uint64_t split = 0;
    std::uint64_t casegen = 0;
    std::uint64_t init = 0;
    std::uint64_t shuffle = 0;
};

// derive_seed(master, "split") and so on; explicit values win.
ResolvedSeeds resolve(const Seeds& seeds);

struct ExperimentConfig {
    ManifestSource manifest;
    FoldProtocol folds;
    std::uint64_t k_train = 10'000;
    std::uint64_t k_test = 30'000;
    std::string network = "tiny";
    int image_size = 100;
    trainer::TrainConfig train;
    double malignancy_threshold = 0.5;
    Seeds seeds;
    std::filesystem::path out_dir = "runs";
    bool verbose = false;  // per-epoch progress on stderr
};

void validate(const ExperimentConfig& config);
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

// Manifest plus preprocessed pixels, loaded once and shared by folds or sweep cells.
struct Dataset {
    dataset::Manifest manifest;
    ImageStore images;
};

Dataset load_dataset(const ExperimentConfig& config);
std::vector<dataset::FoldSplit> resolve_folds(const ExperimentConfig& config, const dataset::Manifest& manifest);

// Throws LeakageDetected if a training case uses an image of a test patient or a test
// case uses an image outside the test patients.
void check_leakage(const casegen::CaseSet& train, const casegen::CaseSet& test, const dataset::Manifest& manifest,
                   const dataset::FoldSplit& fold);

std::vector<metrics::PredictionRecord> predict_cases(const model::NetworkConfig& network,
                                                     const model::Parameters& params, const casegen::CaseSet& cases,
                                                     const dataset::Manifest& manifest, const ImageStore& images,
                                                     int batch_size = 100);

// Everything one fold produces, in memory.
struct FoldRun {
    int fold_index = 1;
    ResolvedSeeds seeds;
    dataset::FoldSplit fold;
    casegen::CaseSet train_cases;
    casegen::CaseSet test_cases;
    std::vector<std::string> truncated_patients;
    std::vector<casegen::PatientIssue> skipped_patients;
    model::NetworkConfig network;
    trainer::TrainResult trained;
    std::vector<metrics::PredictionRecord> predictions;
    metrics::EvaluationReport report;
    double seconds = 0.0;
};

FoldRun execute_fold(const ExperimentConfig& config, const Dataset& data, const dataset::FoldSplit& fold,
                     const ResolvedSeeds& seeds);

// Hash of the resolved config (output location and verbosity excluded) and the manifest.
std::string run_fingerprint(const ExperimentConfig& config, const std::string& manifest_fingerprint, int fold_index);

// Runs one fold and writes config.json, manifest.csv, folds.json, train_cases.jsonl,
// test_cases.jsonl, checkpoint.bin, history.csv, predictions.csv, report.json and
// summary.json into `out`.
nlohmann::json run_fold(const ExperimentConfig& config, int fold_index, const std::filesystem::path& out,
                        const Dataset* preloaded = nullptr);

struct ProtocolResult {
    std::vector<metrics::FoldOutcome> completed;
    std::vector<std::pair<int, std::string>> failed;  // fold index, error record
    std::optional<metrics::ProtocolSummary> summary;
    bool incomplete = false;
};

// All folds into out/fold_<i>; aggregate written to out/protocol.json.
ProtocolResult run_protocol(const ExperimentConfig& config, const std::filesystem::path& out);

struct SweepCell {
    std::uint64_t k = 0;
    int repeat = 0;
    std::uint64_t casegen_seed = 0;
    std::uint64_t init_seed = 0;
    std::optional<double> case_rate;
    std::optional<double> patient_rate;
    std::optional<double> diagnosis_accuracy;
    double seconds_per_epoch = 0.0;
    std::string error;
};

// One model per (k, repeat) on fold 1. Each repeat re-draws both the case set and the
// initial weights from sub-seeds of the master seed. Writes sweep.csv, sweep_summary.csv
// and sweep.svg into `out`.
std::vector<SweepCell> sweep_k(const ExperimentConfig& config, const std::vector<std::uint64_t>& k_values, int repeats,
                               const std::filesystem::path& out, const Dataset* preloaded = nullptr);

// Recomputes every metric from the predictions of each run directory (a fold directory or
// a protocol directory holding fold_<i>) and writes report.md, per-fold and pooled
// confusion CSV/SVG into `out`. Throws MissingArtifact when a run lacks its files.
nlohmann::json report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out);

// {"error": kind, "message": ...}
nlohmann::json error_record(const std::exception& e);

}  // namespace histocase::experiment
