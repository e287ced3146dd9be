#include "histocase/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include "histocase/checkpoint.hpp"
#include "histocase/error.hpp"
#include "histocase/io.hpp"
#include "histocase/random.hpp"

namespace histocase::experiment {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

ResolvedSeeds resolve(const Seeds& s) {
    return {s.split.value_or(derive_seed(s.master, "split")), s.casegen.value_or(derive_seed(s.master, "casegen")),
            s.init.value_or(derive_seed(s.master, "init")), s.shuffle.value_or(derive_seed(s.master, "shuffle"))};
}

namespace {

std::string source_name(SourceKind k) {
    switch (k) {
        case SourceKind::Synthetic: return "synthetic";
        case SourceKind::Csv: return "csv";
        case SourceKind::BreakhisLayout: return "breakhis_layout";
    }
    return "synthetic";
}

SourceKind parse_source(const std::string& s) {
    if (s == "synthetic") return SourceKind::Synthetic;
    if (s == "csv") return SourceKind::Csv;
    if (s == "breakhis_layout" || s == "breakhis") return SourceKind::BreakhisLayout;
    fail(ErrorKind::InvalidConfig, "unknown manifest source '" + s + "'");
}

json synthetic_to_json(const synthetic::SyntheticSpec& s) {
    json signals = json::array();
    for (const auto& g : s.signals)
        signals.push_back({{"magnification", g.magnification},
                           {"kind", g.kind == synthetic::SignalKind::Stripes ? "stripes" : "dots"},
                           {"informative_fraction", g.informative_fraction},
                           {"strength", g.strength}});
    return {{"n_patients", s.n_patients}, {"images_per_cell", s.images_per_cell},
            {"labels", s.labels},         {"image_size", s.image_size},
            {"noise", s.noise},           {"seed", s.seed},
            {"scales_per_patient", s.scales_per_patient},
            {"signals", signals}};
}

synthetic::SyntheticSpec synthetic_from_json(const json& j, std::uint64_t master) {
    synthetic::SyntheticSpec s;
    s.n_patients = j.value("n_patients", s.n_patients);
    s.images_per_cell = j.value("images_per_cell", s.images_per_cell);
    s.labels = j.value("labels", s.labels);
    s.image_size = j.value("image_size", s.image_size);
    s.noise = j.value("noise", s.noise);
    s.scales_per_patient = j.value("scales_per_patient", s.scales_per_patient);
    s.seed = j.contains("seed") ? j.at("seed").get<std::uint64_t>() : derive_seed(master, "synthetic");
    if (j.contains("signals")) {
        s.signals.clear();
        for (const auto& g : j.at("signals"))
            s.signals.push_back({g.at("magnification").get<int>(),
                                 synthetic::parse_signal_kind(g.value("kind", std::string("stripes"))),
                                 g.value("informative_fraction", 0.5), g.value("strength", 1.0)});
    }
    return s;
}

fs::path resolve_path(const json& j, const char* key, const fs::path& base) {
    if (!j.contains(key) || j.at(key).is_null()) return {};
    fs::path p = j.at(key).get<std::string>();
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

metrics::BinaryLabels binary_labels(const dataset::Manifest& m) {
    const auto& labels = m.label_set();
    const metrics::BinaryLabels standard;
    const bool has_standard = std::find(labels.begin(), labels.end(), standard.benign) != labels.end() &&
                              std::find(labels.begin(), labels.end(), standard.malignant) != labels.end();
    if (labels.size() == 2 && has_standard) return standard;
    if (labels.size() == 2) return {labels[0], labels[1]};
    fail(ErrorKind::InvalidConfig, "diagnosis metrics need exactly two labels, have " + std::to_string(labels.size()));
}

std::string hex_fingerprint(const fs::path& p) { return io::hex64(io::file_fingerprint(p)); }

double mean_epoch_seconds(const trainer::TrainingHistory& h) {
    if (h.epochs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : h.epochs) s += e.seconds;
    return s / static_cast<double>(h.epochs.size());
}

}  // namespace

void validate(const ExperimentConfig& c) {
    if (c.k_train == 0) fail(ErrorKind::InvalidConfig, "k_train must be positive");
    if (c.k_test == 0) fail(ErrorKind::InvalidConfig, "k_test must be positive");
    if (c.image_size < 1) fail(ErrorKind::InvalidConfig, "image_size must be positive");
    if (!(c.malignancy_threshold >= 0.0 && c.malignancy_threshold <= 1.0))
        fail(ErrorKind::InvalidConfig, "malignancy_threshold must lie in [0, 1]");
    if (c.folds.file.empty() && c.folds.n_folds < 1) fail(ErrorKind::InvalidConfig, "n_folds must be >= 1");
    if (c.manifest.kind != SourceKind::Synthetic && !fs::exists(c.manifest.path))
        fail(ErrorKind::UnreadablePath, "manifest source " + c.manifest.path.string() + " does not exist");
    if (!c.folds.file.empty() && !fs::exists(c.folds.file))
        fail(ErrorKind::UnreadablePath, "fold file " + c.folds.file.string() + " does not exist");
    trainer::validate(c.train);
}

json to_json(const ExperimentConfig& c) {
    const auto seeds = resolve(c.seeds);
    json manifest = {{"source", source_name(c.manifest.kind)}, {"magnifications", c.manifest.magnifications}};
    if (c.manifest.kind == SourceKind::Synthetic)
        manifest["synthetic"] = synthetic_to_json(c.manifest.synthetic);
    else
        manifest["path"] = c.manifest.path.string();
    json folds = {{"n_folds", c.folds.n_folds}, {"train_fraction", c.folds.train_fraction}, {"stratify", c.folds.stratify}};
    if (!c.folds.file.empty()) folds["file"] = c.folds.file.string();
    json train = c.train;
    return {{"manifest", manifest},
            {"folds", folds},
            {"k_train", c.k_train},
            {"k_test", c.k_test},
            {"network", c.network},
            {"image_size", c.image_size},
            {"train", train},
            {"malignancy_threshold", c.malignancy_threshold},
            {"seeds",
             {{"master", c.seeds.master},
              {"split", seeds.split},
              {"casegen", seeds.casegen},
              {"init", seeds.init},
              {"shuffle", seeds.shuffle}}},
            {"out_dir", c.out_dir.string()}};
}

ExperimentConfig config_from_json(const json& j, const fs::path& base) {
    ExperimentConfig c;
    try {
        if (j.contains("seeds")) {
            const auto& s = j.at("seeds");
            c.seeds.master = s.value("master", std::uint64_t{0});
            for (auto [key, slot] : {std::pair{"split", &c.seeds.split}, std::pair{"casegen", &c.seeds.casegen},
                                     std::pair{"init", &c.seeds.init}, std::pair{"shuffle", &c.seeds.shuffle}})
                if (s.contains(key)) *slot = s.at(key).get<std::uint64_t>();
        } else if (j.contains("seed")) {
            c.seeds.master = j.at("seed").get<std::uint64_t>();
        }
        if (j.contains("manifest")) {
            const auto& m = j.at("manifest");
            c.manifest.kind = parse_source(m.value("source", std::string("synthetic")));
            c.manifest.path = resolve_path(m, "path", base);
            c.manifest.magnifications = m.value("magnifications", std::vector<int>{});
            c.manifest.synthetic = synthetic_from_json(m.value("synthetic", json::object()), c.seeds.master);
        } else {
            c.manifest.synthetic = synthetic_from_json(json::object(), c.seeds.master);
        }
        if (j.contains("folds")) {
            const auto& f = j.at("folds");
            c.folds.n_folds = f.value("n_folds", c.folds.n_folds);
            c.folds.train_fraction = f.value("train_fraction", c.folds.train_fraction);
            c.folds.stratify = f.value("stratify", c.folds.stratify);
            c.folds.file = resolve_path(f, "file", base);
        }
        c.k_train = j.value("k_train", c.k_train);
        c.k_test = j.value("k_test", c.k_test);
        c.network = j.value("network", c.network);
        c.image_size = j.value("image_size", c.image_size);
        if (j.contains("train")) c.train = j.at("train").get<trainer::TrainConfig>();
        c.malignancy_threshold = j.value("malignancy_threshold", c.malignancy_threshold);
        if (j.contains("out_dir")) c.out_dir = resolve_path(j, "out_dir", base);
        c.verbose = j.value("verbose", c.verbose);
    } catch (const json::exception& e) {
        fail(ErrorKind::InvalidConfig, e.what());
    }
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(io::read_text(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
    }
    return config_from_json(j, path.parent_path());
}

Dataset load_dataset(const ExperimentConfig& config) {
    Dataset d;
    const ImageSize size{config.image_size, config.image_size};
    if (config.manifest.kind == SourceKind::Synthetic) {
        auto corpus = synthetic::generate_synthetic_manifest(config.manifest.synthetic);
        d.manifest = corpus.manifest;
        if (!config.manifest.magnifications.empty())
            d.manifest = dataset::restrict_magnifications(d.manifest, config.manifest.magnifications);
        std::map<std::string, Raster> kept;
        for (const auto& r : d.manifest.records()) kept.emplace(r.image_id, std::move(corpus.pixels.at(r.image_id)));
        d.images = load_image_store(kept, size);
    } else {
        const auto format = config.manifest.kind == SourceKind::Csv ? dataset::ManifestFormat::Csv
                                                                    : dataset::ManifestFormat::BreakhisLayout;
        d.manifest = dataset::load_manifest(config.manifest.path, format);
        if (!config.manifest.magnifications.empty())
            d.manifest = dataset::restrict_magnifications(d.manifest, config.manifest.magnifications);
        d.images = load_image_store(d.manifest, size);
    }
    return d;
}

std::vector<dataset::FoldSplit> resolve_folds(const ExperimentConfig& config, const dataset::Manifest& manifest) {
    if (!config.folds.file.empty()) return dataset::load_fold_file(config.folds.file, manifest);
    return dataset::split_folds(manifest, config.folds.n_folds, config.folds.train_fraction, resolve(config.seeds).split,
                                config.folds.stratify);
}

void check_leakage(const casegen::CaseSet& train, const casegen::CaseSet& test, const dataset::Manifest& manifest,
                   const dataset::FoldSplit& fold) {
    const std::set<std::string> test_patients(fold.test_patients.begin(), fold.test_patients.end());
    for (const auto& c : train.cases)
        for (const auto& id : c.images)
            if (test_patients.contains(manifest.find(id).patient_id))
                fail(ErrorKind::LeakageDetected, "training image " + id + " belongs to test patient " +
                                                     manifest.find(id).patient_id);
    for (const auto& c : test.cases)
        for (const auto& id : c.images)
            if (!test_patients.contains(manifest.find(id).patient_id))
                fail(ErrorKind::LeakageDetected, "test image " + id + " belongs to a non-test patient");
}

std::vector<metrics::PredictionRecord> predict_cases(const model::NetworkConfig& network,
                                                     const model::Parameters& params, const casegen::CaseSet& cases,
                                                     const dataset::Manifest& manifest, const ImageStore& images,
                                                     int batch_size) {
    std::vector<metrics::PredictionRecord> out;
    out.reserve(cases.cases.size());
    const auto& labels = manifest.label_set();
    for (std::size_t b = 0; b < cases.cases.size(); b += static_cast<std::size_t>(batch_size)) {
        const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch_size), cases.cases.size() - b);
        std::vector<ImageTensor> tensors;
        for (std::size_t i = 0; i < n; ++i) tensors.push_back(model::assemble_case_tensor(cases.cases[b + i], images));
        std::vector<const ImageTensor*> ptrs;
        for (const auto& t : tensors) ptrs.push_back(&t);
        const auto preds = model::predict_batch(network, params, model::make_batch(ptrs));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& c = cases.cases[b + i];
            out.push_back({std::to_string(b + i), c.patient_id.value_or(""), c.label,
                           labels.at(static_cast<std::size_t>(preds[i].label))});
        }
    }
    return out;
}

FoldRun execute_fold(const ExperimentConfig& config, const Dataset& data, const dataset::FoldSplit& fold,
                     const ResolvedSeeds& seeds) {
    const auto start = std::chrono::steady_clock::now();
    FoldRun run;
    run.fold_index = fold.fold_index;
    run.seeds = seeds;
    run.fold = fold;
    const std::string tag = "fold/" + std::to_string(fold.fold_index);
    const auto train_manifest = dataset::subset_patients(data.manifest, fold.train_patients);
    const auto test_manifest = dataset::subset_patients(data.manifest, fold.test_patients);

    // Case sets first: NotMultiple / InfeasibleK surface before any training.
    run.train_cases = casegen::build_case_set(train_manifest, config.k_train, derive_seed(seeds.casegen, "train/" + tag));
    run.train_cases.manifest_fingerprint = data.manifest.source_fingerprint();
    const auto test_seed = derive_seed(seeds.casegen, "test/" + tag);
    const auto sets = casegen::build_patient_case_sets(
        test_manifest, casegen::apportion(config.k_test, test_manifest.patients()), test_seed);
    run.test_cases = casegen::merge(sets, test_seed, data.manifest.source_fingerprint());
    for (const auto& [p, t] : sets.truncated)
        if (t) run.truncated_patients.push_back(p);
    run.skipped_patients = sets.skipped;
    if (run.test_cases.cases.empty()) fail(ErrorKind::EmptyInput, "no test cases could be formed");
    check_leakage(run.train_cases, run.test_cases, data.manifest, fold);
    const auto diagnosis_labels = binary_labels(data.manifest);

    const auto& mags = data.manifest.magnification_set();
    run.network = model::preset(config.network, config.image_size, config.image_size, static_cast<int>(mags.size()),
                                static_cast<int>(data.manifest.label_set().size()));
    auto params = model::init_parameters(run.network, seeds.init);
    auto tc = config.train;
    tc.seed = seeds.shuffle;
    trainer::EpochCallback progress;
    if (config.verbose)
        progress = [&](const trainer::EpochRecord& e) {
            std::fprintf(stderr, "fold %d epoch %d loss %.4f train_acc %.4f %.1fs\n", fold.fold_index, e.epoch,
                         e.mean_loss, e.train_case_accuracy, e.seconds);
        };
    run.trained = trainer::train(run.network, std::move(params), run.train_cases, data.manifest, data.images, tc, progress);
    run.predictions = predict_cases(run.network, run.trained.params, run.test_cases, data.manifest, data.images,
                                    std::max(1, config.train.batch_size));
    run.report = metrics::evaluate(run.predictions, config.malignancy_threshold, diagnosis_labels);
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return run;
}

std::string run_fingerprint(const ExperimentConfig& config, const std::string& manifest_fingerprint, int fold_index) {
    auto j = to_json(config);
    j.erase("out_dir");
    return io::hex64(fnv1a64(j.dump() + "|" + manifest_fingerprint + "|" + std::to_string(fold_index)));
}

namespace {

json headline(const metrics::EvaluationReport& r) {
    return {{"case_rate", r.case_rate},
            {"patient_rate", r.patient_rate},
            {"diagnosis_accuracy", r.diagnosis.accuracy},
            {"correct_patients", r.diagnosis.correct},
            {"total_patients", r.diagnosis.total},
            {"false_positive_rate", r.confusion.false_positive_rate()},
            {"false_negative_rate", r.confusion.false_negative_rate()}};
}

struct WrittenFold {
    json summary;
    metrics::EvaluationReport report;
};

WrittenFold run_and_write(const ExperimentConfig& config, const Dataset& data, const dataset::FoldSplit& fold,
                          const fs::path& out) {
    const auto seeds = resolve(config.seeds);
    const auto fp = run_fingerprint(config, data.manifest.source_fingerprint(), fold.fold_index);
    FoldRun run;
    try {
        run = execute_fold(config, data, fold, seeds);
    } catch (const Error& e) {
        throw e.with_context("fold " + std::to_string(fold.fold_index));
    }
    fs::create_directories(out);

    auto config_json = to_json(config);
    config_json["run_fingerprint"] = fp;
    io::write_text(out / "config.json", config_json.dump(2) + "\n");
    dataset::write_manifest_csv(data.manifest, out / "manifest.csv");
    dataset::write_fold_file({fold}, out / "folds.json");
    casegen::write_case_set(run.train_cases, out / "train_cases.jsonl", fp);
    casegen::write_case_set(run.test_cases, out / "test_cases.jsonl", fp);
    model::Checkpoint ck{run.network, run.trained.params, std::nullopt, {}};
    ck.metadata = {{"kind", "final"},
                   {"run_fingerprint", fp},
                   {"fold_index", fold.fold_index},
                   {"init_seed", seeds.init},
                   {"shuffle_seed", seeds.shuffle},
                   {"steps", run.trained.history.steps},
                   {"train_config", config.train}};
    model::save_checkpoint(out / "checkpoint.bin", ck);
    trainer::write_history_csv(run.trained.history, out / "history.csv");
    metrics::write_predictions_csv(run.predictions, out / "predictions.csv");

    auto report_json = metrics::to_json(run.report);
    report_json["run_fingerprint"] = fp;
    report_json["fold_index"] = fold.fold_index;
    report_json["provenance"] = {{"config", config_json},
                                 {"manifest_fingerprint", data.manifest.source_fingerprint()},
                                 {"preprocessing", "bilinear resize, intensities divided by 255"}};
    io::write_text(out / "report.json", report_json.dump(2) + "\n");

    json files = json::object();
    for (const char* name : {"config.json", "manifest.csv", "folds.json", "train_cases.jsonl", "test_cases.jsonl",
                             "checkpoint.bin", "history.csv", "predictions.csv", "report.json"})
        files[name] = hex_fingerprint(out / name);
    json skipped = json::array();
    for (const auto& s : run.skipped_patients)
        skipped.push_back({{"patient_id", s.patient_id}, {"missing_magnifications", s.missing_magnifications}});
    json summary = {{"run_fingerprint", fp},
                    {"fold_index", fold.fold_index},
                    {"manifest_fingerprint", data.manifest.source_fingerprint()},
                    {"config", config_json},
                    {"metrics", headline(run.report)},
                    {"train_cases", run.train_cases.cases.size()},
                    {"test_cases", run.test_cases.cases.size()},
                    {"train_steps", run.trained.history.steps},
                    {"truncated_patients", run.truncated_patients},
                    {"skipped_patients", skipped},
                    {"files", files},
                    {"timing", {{"seconds", run.seconds}, {"seconds_per_epoch", mean_epoch_seconds(run.trained.history)}}}};
    io::write_text(out / "summary.json", summary.dump(2) + "\n");
    return {summary, run.report};
}

const dataset::FoldSplit& find_fold(const std::vector<dataset::FoldSplit>& folds, int index) {
    for (const auto& f : folds)
        if (f.fold_index == index) return f;
    fail(ErrorKind::InvalidConfig, "fold " + std::to_string(index) + " is not defined by the protocol");
}

}  // namespace

json run_fold(const ExperimentConfig& config, int fold_index, const fs::path& out, const Dataset* preloaded) {
    validate(config);
    std::optional<Dataset> owned;
    if (!preloaded) owned = load_dataset(config);
    const Dataset& data = preloaded ? *preloaded : *owned;
    const auto folds = resolve_folds(config, data.manifest);
    return run_and_write(config, data, find_fold(folds, fold_index), out).summary;
}

ProtocolResult run_protocol(const ExperimentConfig& config, const fs::path& out) {
    validate(config);
    const Dataset data = load_dataset(config);
    const auto folds = resolve_folds(config, data.manifest);
    if (folds.empty()) fail(ErrorKind::InvalidConfig, "the fold protocol defines no folds");
    ProtocolResult result;
    json fold_rows = json::array();
    for (const auto& f : folds) {
        const auto dir = out / ("fold_" + std::to_string(f.fold_index));
        try {
            const auto written = run_and_write(config, data, f, dir);
            result.completed.push_back(metrics::fold_outcome(f.fold_index, written.report));
            fold_rows.push_back({{"fold_index", f.fold_index}, {"dir", dir.filename().string()}, {"status", "ok"},
                                 {"metrics", written.summary.at("metrics")}});
        } catch (const std::exception& e) {
            result.failed.emplace_back(f.fold_index, e.what());
            fold_rows.push_back({{"fold_index", f.fold_index}, {"status", "failed"}, {"error", error_record(e)}});
        }
    }
    result.incomplete = !result.failed.empty();
    json doc = {{"folds", fold_rows}, {"incomplete", result.incomplete}, {"completed", result.completed.size()},
                {"requested", folds.size()}};
    if (!result.completed.empty()) {
        result.summary = metrics::aggregate_folds(result.completed);
        const auto& s = *result.summary;
        doc["aggregate"] = {{"mean_case_rate", s.mean_case_rate},
                            {"mean_patient_rate", s.mean_patient_rate},
                            {"pooled_diagnosis_accuracy", s.pooled_diagnosis_accuracy},
                            {"pooled_correct", s.pooled_correct},
                            {"pooled_patients", s.pooled_patients},
                            {"pooled_confusion", metrics::to_json(s.pooled_confusion)}};
    }
    io::write_text(out / "protocol.json", doc.dump(2) + "\n");
    return result;
}

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

// Mean with a +/- one standard deviation band per k.
std::string sweep_svg(const std::vector<std::tuple<std::uint64_t, double, double>>& points) {
    const double w = 480, h = 320, left = 60, right = 20, top = 20, bottom = 50;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!points.empty()) {
        double lo = std::log10(static_cast<double>(std::get<0>(points.front())));
        double hi = std::log10(static_cast<double>(std::get<0>(points.back())));
        if (hi - lo < 1e-9) {
            lo -= 0.5;
            hi += 0.5;
        }
        auto x = [&](std::uint64_t k) {
            return left + (std::log10(static_cast<double>(k)) - lo) / (hi - lo) * (w - left - right);
        };
        auto y = [&](double acc) { return top + (1.0 - acc) * (h - top - bottom); };
        s << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
          << "\" stroke=\"black\"/>\n";
        s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
          << "\" stroke=\"black\"/>\n";
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0})
            s << "<text x=\"" << left - 8 << "\" y=\"" << y(t) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
              << fmt(t, "%.2f") << "</text>\n";
        std::string path;
        for (const auto& [k, mean, sd] : points) {
            s << "<line x1=\"" << x(k) << "\" y1=\"" << y(std::min(1.0, mean + sd)) << "\" x2=\"" << x(k) << "\" y2=\""
              << y(std::max(0.0, mean - sd)) << "\" stroke=\"#7a3b8f\"/>\n";
            s << "<circle cx=\"" << x(k) << "\" cy=\"" << y(mean) << "\" r=\"3\" fill=\"#7a3b8f\"/>\n";
            s << "<text x=\"" << x(k) << "\" y=\"" << h - bottom + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
              << k << "</text>\n";
            path += (path.empty() ? "M" : " L") + fmt(x(k), "%.2f") + "," + fmt(y(mean), "%.2f");
        }
        s << "<path d=\"" << path << "\" fill=\"none\" stroke=\"#7a3b8f\"/>\n";
        s << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 10
          << "\" font-size=\"12\" text-anchor=\"middle\">k_train (log scale)</text>\n";
        s << "<text x=\"14\" y=\"" << (top + h - bottom) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
          << (top + h - bottom) / 2 << ")\">test case recognition rate</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

std::string confusion_csv(const metrics::Confusion& c, const metrics::BinaryLabels& l) {
    std::ostringstream s;
    s << "truth\\diagnosis," << l.benign << ',' << l.malignant << '\n';
    s << l.benign << ',' << c.tn << ',' << c.fp << '\n';
    s << l.malignant << ',' << c.fn << ',' << c.tp << '\n';
    return s.str();
}

std::string confusion_svg(const metrics::Confusion& c, const metrics::BinaryLabels& l, const std::string& title) {
    const std::size_t cells[2][2] = {{c.tn, c.fp}, {c.fn, c.tp}};
    const std::string names[2] = {l.benign, l.malignant};
    const double total = std::max<double>(1.0, static_cast<double>(c.total()));
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"300\" height=\"280\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"150\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">" << title << "</text>\n";
    for (int r = 0; r < 2; ++r) {
        s << "<text x=\"85\" y=\"" << 95 + r * 90 << "\" font-size=\"12\" text-anchor=\"end\">" << names[r] << "</text>\n";
        s << "<text x=\"" << 135 + r * 90 << "\" y=\"45\" font-size=\"12\" text-anchor=\"middle\">" << names[r]
          << "</text>\n";
        for (int col = 0; col < 2; ++col) {
            const double share = static_cast<double>(cells[r][col]) / total;
            const int shade = static_cast<int>(std::lround(255 - 160 * share));
            s << "<rect x=\"" << 90 + col * 90 << "\" y=\"" << 50 + r * 90 << "\" width=\"90\" height=\"90\" fill=\"rgb("
              << shade << "," << shade << ",255)\" stroke=\"black\"/>\n";
            s << "<text x=\"" << 135 + col * 90 << "\" y=\"" << 100 + r * 90 << "\" font-size=\"16\" text-anchor=\"middle\">"
              << cells[r][col] << "</text>\n";
        }
    }
    s << "<text x=\"180\" y=\"268\" font-size=\"11\" text-anchor=\"middle\">rows: truth, columns: diagnosis</text>\n";
    s << "</svg>\n";
    return s.str();
}

}  // namespace

std::vector<SweepCell> sweep_k(const ExperimentConfig& config, const std::vector<std::uint64_t>& k_values, int repeats,
                               const fs::path& out, const Dataset* preloaded) {
    validate(config);
    if (k_values.empty()) fail(ErrorKind::InvalidArgument, "no k values given");
    if (repeats < 1) fail(ErrorKind::InvalidArgument, "repeats must be >= 1");
    std::optional<Dataset> owned;
    if (!preloaded) owned = load_dataset(config);
    const Dataset& data = preloaded ? *preloaded : *owned;
    const auto folds = resolve_folds(config, data.manifest);
    const auto& fold = find_fold(folds, 1);
    const auto base = resolve(config.seeds);

    std::vector<SweepCell> cells;
    for (auto k : k_values)
        for (int r = 0; r < repeats; ++r) {
            const std::string tag = "sweep/k" + std::to_string(k) + "/r" + std::to_string(r);
            SweepCell cell{k, r, derive_seed(base.casegen, tag), derive_seed(base.init, tag), {}, {}, {}, 0.0, {}};
            auto cfg = config;
            cfg.k_train = k;
            ResolvedSeeds seeds = base;
            seeds.casegen = cell.casegen_seed;
            seeds.init = cell.init_seed;
            seeds.shuffle = derive_seed(base.shuffle, tag);
            try {
                const auto run = execute_fold(cfg, data, fold, seeds);
                cell.case_rate = run.report.case_rate;
                cell.patient_rate = run.report.patient_rate;
                cell.diagnosis_accuracy = run.report.diagnosis.accuracy;
                cell.seconds_per_epoch = mean_epoch_seconds(run.trained.history);
            } catch (const std::exception& e) {
                cell.error = error_record(e).dump();
            }
            if (config.verbose)
                std::fprintf(stderr, "sweep k=%llu repeat=%d case_rate=%s\n", static_cast<unsigned long long>(k), r,
                             cell.case_rate ? fmt(*cell.case_rate).c_str() : "failed");
            cells.push_back(std::move(cell));
        }

    std::ostringstream rows;
    rows << "k,repeat,casegen_seed,init_seed,case_rate,patient_rate,diagnosis_accuracy,seconds_per_epoch,status\n";
    for (const auto& c : cells) {
        rows << c.k << ',' << c.repeat << ',' << c.casegen_seed << ',' << c.init_seed << ','
             << (c.case_rate ? fmt(*c.case_rate) : "") << ',' << (c.patient_rate ? fmt(*c.patient_rate) : "") << ','
             << (c.diagnosis_accuracy ? fmt(*c.diagnosis_accuracy) : "") << ',' << fmt(c.seconds_per_epoch, "%.3f")
             << ',' << (c.error.empty() ? "ok" : io::csv_escape(c.error)) << '\n';
    }
    io::write_text(out / "sweep.csv", rows.str());

    std::ostringstream summary;
    summary << "k,runs,mean_case_rate,std_case_rate,mean_seconds_per_epoch\n";
    std::vector<std::tuple<std::uint64_t, double, double>> points;
    for (auto k : k_values) {
        std::vector<double> acc;
        double secs = 0.0;
        for (const auto& c : cells)
            if (c.k == k && c.case_rate) {
                acc.push_back(*c.case_rate);
                secs += c.seconds_per_epoch;
            }
        if (acc.empty()) {
            summary << k << ",0,,,\n";
            continue;
        }
        double mean = 0.0;
        for (double a : acc) mean += a;
        mean /= static_cast<double>(acc.size());
        double var = 0.0;
        for (double a : acc) var += (a - mean) * (a - mean);
        const double sd = acc.size() > 1 ? std::sqrt(var / static_cast<double>(acc.size() - 1)) : 0.0;
        summary << k << ',' << acc.size() << ',' << fmt(mean) << ',' << fmt(sd) << ','
                << fmt(secs / static_cast<double>(acc.size()), "%.3f") << '\n';
        points.emplace_back(k, mean, sd);
    }
    io::write_text(out / "sweep_summary.csv", summary.str());
    io::write_text(out / "sweep.svg", sweep_svg(points));
    return cells;
}

json report(const std::vector<fs::path>& run_dirs, const fs::path& out) {
    if (run_dirs.empty()) fail(ErrorKind::MissingArtifact, "no run directories given");
    std::vector<fs::path> fold_dirs;
    for (const auto& d : run_dirs) {
        if (fs::exists(d / "summary.json")) {
            fold_dirs.push_back(d);
            continue;
        }
        std::vector<fs::path> nested;
        if (fs::is_directory(d))
            for (const auto& e : fs::directory_iterator(d))
                if (e.is_directory() && e.path().filename().string().starts_with("fold_")) nested.push_back(e.path());
        if (nested.empty()) fail(ErrorKind::MissingArtifact, d.string() + " holds no run summary");
        std::sort(nested.begin(), nested.end());
        fold_dirs.insert(fold_dirs.end(), nested.begin(), nested.end());
    }

    struct Row {
        int fold;
        metrics::EvaluationReport report;
        metrics::BinaryLabels labels;
        bool consistent;
    };
    std::vector<Row> rows;
    for (const auto& d : fold_dirs) {
        for (const char* name : {"summary.json", "config.json", "predictions.csv"})
            if (!fs::exists(d / name)) fail(ErrorKind::MissingArtifact, (d / name).string());
        const auto summary = json::parse(io::read_text(d / "summary.json"));
        const auto config = json::parse(io::read_text(d / "config.json"));
        const double threshold = config.value("malignancy_threshold", 0.5);
        const auto preds = metrics::read_predictions_csv(d / "predictions.csv");
        std::set<std::string> labels;
        for (const auto& p : preds) {
            labels.insert(p.true_label);
            labels.insert(p.predicted_label);
        }
        metrics::BinaryLabels bl;
        if (!labels.contains(bl.benign) && labels.size() == 2) bl = {*labels.begin(), *std::next(labels.begin())};
        const auto r = metrics::evaluate(preds, threshold, bl);
        // Round trip: the stored report must agree with the recomputation.
        bool consistent = true;
        if (fs::exists(d / "report.json")) {
            const auto stored = json::parse(io::read_text(d / "report.json"));
            consistent = std::abs(stored.value("case_rate", -1.0) - r.case_rate) <= 1e-12 &&
                         std::abs(stored.value("patient_rate", -1.0) - r.patient_rate) <= 1e-12 &&
                         std::abs(stored.value("diagnosis_accuracy", -1.0) - r.diagnosis.accuracy) <= 1e-12;
        }
        rows.push_back({summary.value("fold_index", static_cast<int>(rows.size()) + 1), r, bl, consistent});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.fold < b.fold; });

    std::vector<metrics::FoldOutcome> outcomes;
    for (const auto& r : rows) outcomes.push_back(metrics::fold_outcome(r.fold, r.report));
    const auto agg = metrics::aggregate_folds(outcomes);

    std::ostringstream md;
    md << "| Metric |";
    for (const auto& r : rows) md << " Fold " << r.fold << " |";
    md << " Average |\n|---|";
    for (std::size_t i = 0; i <= rows.size(); ++i) md << "---|";
    md << "\n| Case recognition rate |";
    for (const auto& r : rows) md << ' ' << fmt(100.0 * r.report.case_rate, "%.2f%%") << " |";
    md << ' ' << fmt(100.0 * agg.mean_case_rate, "%.2f%%") << " |\n| Patient recognition rate |";
    for (const auto& r : rows) md << ' ' << fmt(100.0 * r.report.patient_rate, "%.2f%%") << " |";
    md << ' ' << fmt(100.0 * agg.mean_patient_rate, "%.2f%%") << " |\n| Diagnosis accuracy |";
    for (const auto& r : rows)
        md << ' ' << r.report.diagnosis.correct << '/' << r.report.diagnosis.total << " ("
           << fmt(100.0 * r.report.diagnosis.accuracy, "%.2f%%") << ") |";
    md << ' ' << agg.pooled_correct << '/' << agg.pooled_patients << " ("
       << fmt(100.0 * agg.pooled_diagnosis_accuracy, "%.2f%%") << ") |\n\n";
    const auto& pc = agg.pooled_confusion;
    md << "Pooled confusion: TP " << pc.tp << ", FP " << pc.fp << ", TN " << pc.tn << ", FN " << pc.fn
       << "; FPR " << fmt(pc.false_positive_rate(), "%.4f") << ", FNR " << fmt(pc.false_negative_rate(), "%.4f")
       << " (share of all patients); class-conditional FPR " << fmt(pc.false_positive_rate_conditional(), "%.4f")
       << ", FNR " << fmt(pc.false_negative_rate_conditional(), "%.4f") << ".\n";

    fs::create_directories(out);
    io::write_text(out / "report.md", md.str());
    std::ostringstream table;
    table << "fold,case_rate,patient_rate,diagnosis_accuracy,correct_patients,total_patients,tp,fp,tn,fn,consistent\n";
    json folds = json::array();
    for (const auto& r : rows) {
        const auto& c = r.report.confusion;
        table << r.fold << ',' << fmt(r.report.case_rate) << ',' << fmt(r.report.patient_rate) << ','
              << fmt(r.report.diagnosis.accuracy) << ',' << r.report.diagnosis.correct << ',' << r.report.diagnosis.total
              << ',' << c.tp << ',' << c.fp << ',' << c.tn << ',' << c.fn << ',' << (r.consistent ? "yes" : "no") << '\n';
        const std::string name = "confusion_fold" + std::to_string(r.fold);
        io::write_text(out / (name + ".csv"), confusion_csv(c, r.labels));
        io::write_text(out / (name + ".svg"), confusion_svg(c, r.labels, "Fold " + std::to_string(r.fold)));
        folds.push_back({{"fold", r.fold}, {"metrics", metrics::to_json(r.report)}, {"consistent", r.consistent}});
    }
    io::write_text(out / "table.csv", table.str());
    io::write_text(out / "confusion_pooled.csv", confusion_csv(pc, rows.front().labels));
    io::write_text(out / "confusion_pooled.svg", confusion_svg(pc, rows.front().labels, "All folds"));

    bool all_consistent = true;
    for (const auto& r : rows) all_consistent = all_consistent && r.consistent;
    return {{"folds", folds},
            {"mean_case_rate", agg.mean_case_rate},
            {"mean_patient_rate", agg.mean_patient_rate},
            {"pooled_diagnosis_accuracy", agg.pooled_diagnosis_accuracy},
            {"pooled_confusion", metrics::to_json(pc)},
            {"consistent", all_consistent},
            {"markdown", md.str()}};
}

json error_record(const std::exception& e) {
    if (const auto* err = dynamic_cast<const Error*>(&e))
        return {{"error", std::string(to_string(err->kind()))}, {"message", err->detail()}};
    return {{"error", "Internal"}, {"message", e.what()}};
}

}  // namespace histocase::experiment
