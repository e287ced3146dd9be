#include "histocase/metrics.hpp"

#include <map>
#include <sstream>

#include "histocase/error.hpp"
#include "histocase/io.hpp"

namespace histocase::metrics {

namespace {

void require_nonempty(std::span<const PredictionRecord> preds) {
    if (preds.empty()) fail(ErrorKind::EmptyInput, "no predictions");
}

std::map<std::string, std::vector<const PredictionRecord*>> by_patient(std::span<const PredictionRecord> preds) {
    std::map<std::string, std::vector<const PredictionRecord*>> groups;
    for (const auto& p : preds) {
        if (p.patient_id.empty()) fail(ErrorKind::InvalidArgument, "prediction " + p.case_ref + " has no patient_id");
        groups[p.patient_id].push_back(&p);
    }
    return groups;
}

std::string diagnose(std::size_t n_benign, std::size_t n_all, double threshold, const BinaryLabels& labels) {
    const double ratio = static_cast<double>(n_benign) / static_cast<double>(n_all);
    return ratio > threshold ? labels.benign : labels.malignant;
}

}  // namespace

double case_recognition_rate(std::span<const PredictionRecord> preds) {
    require_nonempty(preds);
    std::size_t correct = 0;
    for (const auto& p : preds) correct += p.predicted_label == p.true_label ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double patient_recognition_rate(std::span<const PredictionRecord> preds) {
    require_nonempty(preds);
    const auto groups = by_patient(preds);
    double sum = 0.0;
    for (const auto& [patient, records] : groups) {
        std::size_t correct = 0;
        for (const auto* p : records) correct += p->predicted_label == p->true_label ? 1 : 0;
        sum += static_cast<double>(correct) / static_cast<double>(records.size());
    }
    return sum / static_cast<double>(groups.size());
}

std::string patient_diagnosis(std::span<const PredictionRecord> patient_preds, double malignancy_threshold,
                              const BinaryLabels& labels) {
    require_nonempty(patient_preds);
    std::size_t benign = 0;
    for (const auto& p : patient_preds) {
        if (p.patient_id != patient_preds.front().patient_id)
            fail(ErrorKind::InvalidArgument, "predictions span more than one patient");
        benign += p.predicted_label == labels.benign ? 1 : 0;
    }
    return diagnose(benign, patient_preds.size(), malignancy_threshold, labels);
}

DiagnosisResult diagnosis_accuracy(std::span<const PredictionRecord> preds, double malignancy_threshold,
                                   const BinaryLabels& labels) {
    require_nonempty(preds);
    DiagnosisResult result;
    for (const auto& [patient, records] : by_patient(preds)) {
        PatientDiagnosis d;
        d.patient_id = patient;
        d.true_label = records.front()->true_label;
        for (const auto* p : records) {
            if (p->true_label != d.true_label)
                fail(ErrorKind::InconsistentTruth, "patient " + patient + " has conflicting true labels");
            d.n_predicted_benign += p->predicted_label == labels.benign ? 1 : 0;
            d.n_correct_cases += p->predicted_label == p->true_label ? 1 : 0;
        }
        if (d.true_label != labels.benign && d.true_label != labels.malignant)
            fail(ErrorKind::UnknownLabel, "patient " + patient + " has non-binary label " + d.true_label);
        d.n_cases = records.size();
        d.diagnosis = diagnose(d.n_predicted_benign, d.n_cases, malignancy_threshold, labels);
        d.correct = d.diagnosis == d.true_label;
        result.correct += d.correct ? 1 : 0;
        result.per_patient.push_back(std::move(d));
    }
    result.total = result.per_patient.size();
    result.accuracy = static_cast<double>(result.correct) / static_cast<double>(result.total);
    return result;
}

double Confusion::false_positive_rate() const {
    return total() == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(total());
}
double Confusion::false_negative_rate() const {
    return total() == 0 ? 0.0 : static_cast<double>(fn) / static_cast<double>(total());
}
double Confusion::false_positive_rate_conditional() const {
    return fp + tn == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(fp + tn);
}
double Confusion::false_negative_rate_conditional() const {
    return fn + tp == 0 ? 0.0 : static_cast<double>(fn) / static_cast<double>(fn + tp);
}

Confusion& Confusion::operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
}

Confusion confusion_summary(std::span<const PatientDiagnosis> per_patient, const BinaryLabels& labels) {
    Confusion c;
    for (const auto& d : per_patient) {
        const bool truth_malignant = d.true_label == labels.malignant;
        const bool said_malignant = d.diagnosis == labels.malignant;
        if (truth_malignant && said_malignant) ++c.tp;
        else if (!truth_malignant && said_malignant) ++c.fp;
        else if (!truth_malignant) ++c.tn;
        else ++c.fn;
    }
    return c;
}

EvaluationReport evaluate(std::span<const PredictionRecord> preds, double malignancy_threshold,
                          const BinaryLabels& labels) {
    EvaluationReport r;
    r.case_rate = case_recognition_rate(preds);
    r.patient_rate = patient_recognition_rate(preds);
    r.diagnosis = diagnosis_accuracy(preds, malignancy_threshold, labels);
    r.confusion = confusion_summary(r.diagnosis.per_patient, labels);
    r.malignancy_threshold = malignancy_threshold;
    r.n_cases = preds.size();
    return r;
}

std::vector<SweepPoint> threshold_sweep(std::span<const PredictionRecord> preds, std::span<const double> thresholds,
                                        const BinaryLabels& labels) {
    std::vector<SweepPoint> out;
    for (double t : thresholds) {
        const auto d = diagnosis_accuracy(preds, t, labels);
        out.push_back({t, d.accuracy, confusion_summary(d.per_patient, labels)});
    }
    return out;
}

nlohmann::json to_json(const Confusion& c) {
    return {{"tp", c.tp},
            {"fp", c.fp},
            {"tn", c.tn},
            {"fn", c.fn},
            {"false_positive_rate", c.false_positive_rate()},
            {"false_negative_rate", c.false_negative_rate()},
            {"false_positive_rate_class_conditional", c.false_positive_rate_conditional()},
            {"false_negative_rate_class_conditional", c.false_negative_rate_conditional()}};
}

nlohmann::json to_json(const EvaluationReport& r) {
    nlohmann::json patients = nlohmann::json::object();
    for (const auto& d : r.diagnosis.per_patient)
        patients[d.patient_id] = {{"true_label", d.true_label},       {"diagnosis", d.diagnosis},
                                  {"correct", d.correct},             {"cases", d.n_cases},
                                  {"predicted_benign", d.n_predicted_benign}, {"correct_cases", d.n_correct_cases}};
    return {{"case_rate", r.case_rate},
            {"patient_rate", r.patient_rate},
            {"diagnosis_accuracy", r.diagnosis.accuracy},
            {"correct_patients", r.diagnosis.correct},
            {"total_patients", r.diagnosis.total},
            {"n_cases", r.n_cases},
            {"malignancy_threshold", r.malignancy_threshold},
            {"confusion", to_json(r.confusion)},
            {"per_patient_diagnosis", patients}};
}

void write_predictions_csv(std::span<const PredictionRecord> preds, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "case_ref,patient_id,true_label,predicted_label\n";
    for (const auto& p : preds)
        ss << io::csv_escape(p.case_ref) << ',' << io::csv_escape(p.patient_id) << ',' << io::csv_escape(p.true_label)
           << ',' << io::csv_escape(p.predicted_label) << '\n';
    io::write_text(path, ss.str());
}

std::vector<PredictionRecord> read_predictions_csv(const std::filesystem::path& path) {
    std::istringstream in(io::read_text(path));
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::MissingColumn, path.string() + " is empty");
    const auto header = io::split_csv_line(line);
    const std::vector<std::string> expected{"case_ref", "patient_id", "true_label", "predicted_label"};
    if (header != expected) fail(ErrorKind::MissingColumn, path.string() + ": unexpected predictions header");
    std::vector<PredictionRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = io::split_csv_line(line);
        if (f.size() != 4) fail(ErrorKind::MalformedRecord, path.string() + ": expected 4 fields");
        out.push_back({f[0], f[1], f[2], f[3]});
    }
    return out;
}

FoldOutcome fold_outcome(int fold_index, const EvaluationReport& report) {
    return {fold_index, report.case_rate, report.patient_rate, report.diagnosis.correct, report.diagnosis.total,
            report.confusion};
}

ProtocolSummary aggregate_folds(std::span<const FoldOutcome> folds) {
    if (folds.empty()) fail(ErrorKind::EmptyInput, "no completed folds");
    ProtocolSummary s;
    s.folds = folds.size();
    for (const auto& f : folds) {
        s.mean_case_rate += f.case_rate;
        s.mean_patient_rate += f.patient_rate;
        s.pooled_correct += f.correct_patients;
        s.pooled_patients += f.total_patients;
        s.pooled_confusion += f.confusion;
    }
    s.mean_case_rate /= static_cast<double>(folds.size());
    s.mean_patient_rate /= static_cast<double>(folds.size());
    s.pooled_diagnosis_accuracy =
        s.pooled_patients == 0 ? 0.0 : static_cast<double>(s.pooled_correct) / static_cast<double>(s.pooled_patients);
    return s;
}

}  // namespace histocase::metrics
