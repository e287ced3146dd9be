// histocase: command-line runner for the case-based classification pipeline.
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "histocase/casegen.hpp"
#include "histocase/checkpoint.hpp"
#include "histocase/dataset.hpp"
#include "histocase/error.hpp"
#include "histocase/experiment.hpp"
#include "histocase/io.hpp"
#include "histocase/metrics.hpp"
#include "histocase/model.hpp"
#include "histocase/synthetic.hpp"
#include "histocase/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace histocase;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
    auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "master seed; overrides the config");
    cmd->add_option("--out", c.out, "output path");
}

// --seed rewrites the master before parsing so unpinned sub-seeds (synthetic included) follow it.
experiment::ExperimentConfig load(const Common& c) {
    json j = json::object();
    fs::path base;
    if (!c.config.empty()) {
        try {
            j = json::parse(io::read_text(c.config));
        } catch (const json::exception& e) {
            fail(ErrorKind::InvalidConfig, c.config + ": " + e.what());
        }
        base = fs::path(c.config).parent_path();
    }
    if (c.seed) {
        if (j.contains("seed")) j.erase("seed");
        j["seeds"]["master"] = *c.seed;
    }
    auto config = experiment::config_from_json(j, base);
    if (!c.out.empty()) config.out_dir = c.out;
    return config;
}

fs::path out_or(const Common& c, const fs::path& fallback) { return c.out.empty() ? fallback : fs::path(c.out); }

dataset::Manifest read_manifest(const std::string& path) {
    return dataset::load_manifest(path, dataset::ManifestFormat::Csv);
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Case-based multi-magnification histopathology classification"};
    app.require_subcommand(1);

    // synth
    Common synth_c;
    int synth_patients = 8, synth_ipc = 4, synth_size = 32, synth_spp = -1;
    auto* synth = app.add_subcommand("synth", "render a synthetic corpus to PNG files and a manifest CSV");
    add_common(synth, synth_c, false);
    synth->add_option("--patients", synth_patients, "number of patients");
    synth->add_option("--images-per-cell", synth_ipc, "images per patient and magnification");
    synth->add_option("--size", synth_size, "image side in pixels");
    synth->add_option("--scales-per-patient", synth_spp, "magnifications at which each patient shows its class");

    // ingest
    Common ingest_c;
    std::string ingest_source = "csv", ingest_path;
    auto* ingest = app.add_subcommand("ingest", "validate a manifest and write its normalized CSV");
    add_common(ingest, ingest_c, false);
    ingest->add_option("--format", ingest_source, "csv or breakhis")->check(CLI::IsMember({"csv", "breakhis"}));
    ingest->add_option("path", ingest_path, "manifest CSV or BreaKHis root")->required();

    // split
    Common split_c;
    std::string split_manifest;
    int split_folds = 5;
    double split_fraction = 0.659;
    bool split_plain = false;
    auto* split = app.add_subcommand("split", "patient-disjoint train/test folds");
    add_common(split, split_c, false);
    split->add_option("--manifest", split_manifest, "manifest CSV")->required();
    split->add_option("--folds", split_folds, "number of folds");
    split->add_option("--train-fraction", split_fraction, "share of patients used for training");
    split->add_flag("--no-stratify", split_plain, "ignore labels when splitting");

    // gen-cases
    Common gen_c;
    std::string gen_manifest, gen_fold_file, gen_role = "train";
    std::uint64_t gen_k = 0;
    int gen_fold = 1;
    auto* gen = app.add_subcommand("gen-cases", "generate a case set");
    add_common(gen, gen_c, false);
    gen->add_option("--manifest", gen_manifest, "manifest CSV")->required();
    gen->add_option("-k", gen_k, "number of cases")->required();
    gen->add_option("--fold-file", gen_fold_file, "restrict to one fold's patients");
    gen->add_option("--fold", gen_fold, "fold index in the fold file");
    gen->add_option("--role", gen_role, "train: balanced set; test: per-patient sets")
        ->check(CLI::IsMember({"train", "test"}));

    // train
    Common train_c;
    std::string train_manifest, train_cases, train_resume;
    auto* train = app.add_subcommand("train", "train a network on a case set");
    add_common(train, train_c, false);
    train->add_option("--manifest", train_manifest, "manifest CSV")->required();
    train->add_option("--cases", train_cases, "case set JSONL")->required();
    train->add_option("--resume", train_resume, "continue from this checkpoint");

    // evaluate
    Common eval_c;
    std::string eval_manifest, eval_cases, eval_checkpoint, eval_predictions;
    std::optional<double> eval_threshold;
    auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on a case set, or re-score a predictions CSV");
    add_common(evaluate, eval_c, false);
    evaluate->add_option("--manifest", eval_manifest, "manifest CSV");
    evaluate->add_option("--cases", eval_cases, "case set JSONL");
    evaluate->add_option("--checkpoint", eval_checkpoint, "trained checkpoint");
    evaluate->add_option("--predictions", eval_predictions, "existing predictions CSV");
    evaluate->add_option("--threshold", eval_threshold, "malignancy threshold");

    // run-fold
    Common fold_c;
    int fold_index = 1;
    auto* run_fold = app.add_subcommand("run-fold", "full pipeline for one fold");
    add_common(run_fold, fold_c, true);
    run_fold->add_option("--fold", fold_index, "fold index (1-based)");

    // run-protocol
    Common proto_c;
    auto* run_protocol = app.add_subcommand("run-protocol", "all folds plus aggregate");
    add_common(run_protocol, proto_c, true);

    // sweep-k
    Common sweep_c;
    std::vector<std::uint64_t> sweep_ks{100, 1000, 10000};
    int sweep_repeats = 3;
    auto* sweep = app.add_subcommand("sweep-k", "accuracy against k_train on fold 1");
    add_common(sweep, sweep_c, true);
    sweep->add_option("--k", sweep_ks, "k_train values")->delimiter(',');
    sweep->add_option("--repeats", sweep_repeats, "models per k");

    // report
    Common report_c;
    std::vector<std::string> report_dirs;
    auto* report = app.add_subcommand("report", "tables and confusion matrices from run directories");
    add_common(report, report_c, false);
    report->add_option("runs", report_dirs, "fold or protocol directories")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            auto config = load(synth_c);
            auto spec = config.manifest.synthetic;
            if (synth->count("--patients")) spec.n_patients = synth_patients;
            if (synth->count("--images-per-cell")) spec.images_per_cell = synth_ipc;
            if (synth->count("--size")) spec.image_size = synth_size;
            if (synth_spp >= 0) spec.scales_per_patient = synth_spp;
            const auto dir = out_or(synth_c, "synthetic");
            const auto corpus = synthetic::generate_synthetic_manifest(spec);
            const auto written = synthetic::write_pixel_store(corpus, dir / "images");
            dataset::write_manifest_csv(written, dir / "manifest.csv");
            print({{"manifest", (dir / "manifest.csv").string()},
                   {"images", written.records().size()},
                   {"patients", written.patients().size()},
                   {"fingerprint", written.source_fingerprint()}});
        } else if (ingest->parsed()) {
            const auto m = dataset::load_manifest(ingest_path, dataset::parse_manifest_format(ingest_source));
            json cells = json::object();
            for (const auto& label : m.label_set())
                for (int mag : m.magnification_set()) {
                    std::size_t n = 0;
                    for (const auto& r : m.records()) n += r.malignancy == label && r.magnification == mag;
                    cells[label][std::to_string(mag)] = n;
                }
            if (!ingest_c.out.empty()) dataset::write_manifest_csv(m, ingest_c.out);
            print({{"images", m.records().size()},
                   {"patients", m.patients().size()},
                   {"labels", m.label_set()},
                   {"magnifications", m.magnification_set()},
                   {"cells", cells},
                   {"fingerprint", m.source_fingerprint()}});
        } else if (split->parsed()) {
            const auto m = read_manifest(split_manifest);
            const auto seeds = experiment::resolve({split_c.seed.value_or(0), {}, {}, {}, {}});
            const auto folds = dataset::split_folds(m, split_folds, split_fraction, seeds.split, !split_plain);
            const auto path = out_or(split_c, "folds.json");
            dataset::write_fold_file(folds, path);
            print({{"folds", folds.size()}, {"file", path.string()}});
        } else if (gen->parsed()) {
            auto m = read_manifest(gen_manifest);
            if (!gen_fold_file.empty()) {
                const auto folds = dataset::load_fold_file(gen_fold_file, m);
                const auto it = std::find_if(folds.begin(), folds.end(),
                                             [&](const auto& f) { return f.fold_index == gen_fold; });
                if (it == folds.end()) fail(ErrorKind::InvalidArgument, "fold " + std::to_string(gen_fold) + " not in file");
                m = dataset::subset_patients(m, gen_role == "train" ? it->train_patients : it->test_patients);
            }
            const auto seed = experiment::resolve({gen_c.seed.value_or(0), {}, {}, {}, {}}).casegen;
            casegen::CaseSet set;
            json extra = json::object();
            if (gen_role == "train") {
                set = casegen::build_case_set(m, gen_k, seed);
            } else {
                const auto sets = casegen::build_patient_case_sets(m, casegen::apportion(gen_k, m.patients()), seed);
                set = casegen::merge(sets, seed, m.source_fingerprint());
                json skipped = json::array();
                for (const auto& s : sets.skipped) skipped.push_back(s.patient_id);
                extra["skipped_patients"] = skipped;
            }
            set.manifest_fingerprint = m.source_fingerprint();
            const auto path = out_or(gen_c, "cases.jsonl");
            casegen::write_case_set(set, path);
            extra["cases"] = set.cases.size();
            extra["file"] = path.string();
            print(extra);
        } else if (train->parsed()) {
            const auto config = load(train_c);
            const auto m = read_manifest(train_manifest);
            const auto cases = casegen::read_case_set(train_cases);
            const auto images = load_image_store(m, {config.image_size, config.image_size});
            const auto seeds = experiment::resolve(config.seeds);
            auto tc = config.train;
            tc.seed = seeds.shuffle;
            const auto dir = out_or(train_c, "train_out");
            fs::create_directories(dir);
            if (tc.checkpoint_every > 0 && tc.checkpoint_path.empty()) tc.checkpoint_path = dir / "checkpoint_last.bin";
            auto progress = [&](const trainer::EpochRecord& e) {
                std::fprintf(stderr, "epoch %d loss %.4f train_acc %.4f %.1fs\n", e.epoch, e.mean_loss,
                             e.train_case_accuracy, e.seconds);
            };
            trainer::TrainResult result;
            model::NetworkConfig network;
            if (!train_resume.empty()) {
                network = model::load_checkpoint(train_resume).config;
                result = trainer::resume(train_resume, cases, m, images, tc, progress);
            } else {
                network = model::preset(config.network, config.image_size, config.image_size,
                                        static_cast<int>(m.magnification_set().size()),
                                        static_cast<int>(m.label_set().size()));
                result = trainer::train(network, model::init_parameters(network, seeds.init), cases, m, images, tc,
                                        progress);
            }
            trainer::save_training_checkpoint(dir / "checkpoint.bin", network, result, tc);
            trainer::write_history_csv(result.history, dir / "history.csv");
            print({{"checkpoint", (dir / "checkpoint.bin").string()},
                   {"steps", result.history.steps},
                   {"final_loss", result.history.epochs.empty() ? 0.0 : result.history.epochs.back().mean_loss}});
        } else if (evaluate->parsed()) {
            const auto config = load(eval_c);
            const double threshold = eval_threshold.value_or(config.malignancy_threshold);
            std::vector<metrics::PredictionRecord> preds;
            if (!eval_predictions.empty()) {
                preds = metrics::read_predictions_csv(eval_predictions);
            } else {
                if (eval_manifest.empty() || eval_cases.empty() || eval_checkpoint.empty())
                    fail(ErrorKind::InvalidArgument,
                         "evaluate needs --predictions, or --manifest, --cases and --checkpoint");
                const auto m = read_manifest(eval_manifest);
                const auto ck = model::load_checkpoint(eval_checkpoint);
                const auto cases = casegen::read_case_set(eval_cases);
                const auto images = load_image_store(m, {ck.config.input_height, ck.config.input_width});
                preds = experiment::predict_cases(ck.config, ck.params, cases, m, images);
            }
            std::set<std::string> labels;
            for (const auto& p : preds) labels.insert(p.true_label);
            metrics::BinaryLabels bl;
            if (!labels.contains(bl.benign) && !labels.contains(bl.malignant) && labels.size() == 2)
                bl = {*labels.begin(), *std::next(labels.begin())};
            const auto r = metrics::evaluate(preds, threshold, bl);
            const auto dir = out_or(eval_c, "eval_out");
            fs::create_directories(dir);
            if (eval_predictions.empty()) metrics::write_predictions_csv(preds, dir / "predictions.csv");
            io::write_text(dir / "report.json", metrics::to_json(r).dump(2) + "\n");
            print({{"case_rate", r.case_rate},
                   {"patient_rate", r.patient_rate},
                   {"diagnosis_accuracy", r.diagnosis.accuracy},
                   {"report", (dir / "report.json").string()}});
        } else if (run_fold->parsed()) {
            auto config = load(fold_c);
            const auto dir = config.out_dir / ("fold_" + std::to_string(fold_index));
            const auto summary = experiment::run_fold(config, fold_index, dir);
            print({{"dir", dir.string()}, {"run_fingerprint", summary.at("run_fingerprint")},
                   {"metrics", summary.at("metrics")}});
        } else if (run_protocol->parsed()) {
            const auto config = load(proto_c);
            const auto result = experiment::run_protocol(config, config.out_dir);
            print(json::parse(io::read_text(config.out_dir / "protocol.json")));
            if (result.completed.empty()) return 1;
        } else if (sweep->parsed()) {
            const auto config = load(sweep_c);
            fs::create_directories(config.out_dir);
            experiment::sweep_k(config, sweep_ks, sweep_repeats, config.out_dir);
            std::cout << io::read_text(config.out_dir / "sweep_summary.csv");
        } else if (report->parsed()) {
            std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
            const auto result = experiment::report(dirs, out_or(report_c, "report"));
            std::cout << result.at("markdown").get<std::string>();
            if (!result.at("consistent").get<bool>()) {
                std::cerr << json{{"error", "InconsistentReport"},
                                  {"message", "stored report.json disagrees with predictions.csv"}}
                                 .dump()
                          << '\n';
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << experiment::error_record(e).dump() << '\n';
        return 1;
    }
    return 0;
}
