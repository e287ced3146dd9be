#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace histocase::metrics {

struct PredictionRecord {
    std::string case_ref;
    std::string patient_id;
    std::string true_label;
    std::string predicted_label;
};

// "Positive" is the malignant label.
struct BinaryLabels {
    std::string benign = "benign";
    std::string malignant = "malignant";
};

// Correct cases over all cases.
double case_recognition_rate(std::span<const PredictionRecord> preds);

// Mean over patients of each patient's share of correctly classified cases.
double patient_recognition_rate(std::span<const PredictionRecord> preds);

// Benign iff (cases predicted benign) / (all cases) > threshold, strictly; otherwise malignant.
std::string patient_diagnosis(std::span<const PredictionRecord> patient_preds, double malignancy_threshold,
                              const BinaryLabels& labels = {});

struct PatientDiagnosis {
    std::string patient_id;
    std::string true_label;
    std::string diagnosis;
    bool correct = false;
    std::size_t n_cases = 0;
    std::size_t n_predicted_benign = 0;
    std::size_t n_correct_cases = 0;
};

struct DiagnosisResult {
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
    std::vector<PatientDiagnosis> per_patient;  // patient_id order
};

DiagnosisResult diagnosis_accuracy(std::span<const PredictionRecord> preds, double malignancy_threshold,
                                   const BinaryLabels& labels = {});

struct Confusion {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }
    // Over all patients.
    double false_positive_rate() const;
    double false_negative_rate() const;
    // Class-conditional: FP / (FP + TN) and FN / (FN + TP); 0 when the class is absent.
    double false_positive_rate_conditional() const;
    double false_negative_rate_conditional() const;

    Confusion& operator+=(const Confusion& other);
    bool operator==(const Confusion&) const = default;
};

Confusion confusion_summary(std::span<const PatientDiagnosis> per_patient, const BinaryLabels& labels = {});

struct EvaluationReport {
    double case_rate = 0.0;
    double patient_rate = 0.0;
    DiagnosisResult diagnosis;
    Confusion confusion;
    double malignancy_threshold = 0.5;
    std::size_t n_cases = 0;
};

EvaluationReport evaluate(std::span<const PredictionRecord> preds, double malignancy_threshold = 0.5,
                          const BinaryLabels& labels = {});

struct SweepPoint {
    double threshold = 0.0;
    double diagnosis_accuracy = 0.0;
    Confusion confusion;
};

std::vector<SweepPoint> threshold_sweep(std::span<const PredictionRecord> preds, std::span<const double> thresholds,
                                        const BinaryLabels& labels = {});

nlohmann::json to_json(const EvaluationReport& report);
nlohmann::json to_json(const Confusion& confusion);

// CSV with header case_ref,patient_id,true_label,predicted_label.
void write_predictions_csv(std::span<const PredictionRecord> preds, const std::filesystem::path& path);
std::vector<PredictionRecord> read_predictions_csv(const std::filesystem::path& path);

struct FoldOutcome {
    int fold_index = 1;
    double case_rate = 0.0;
    double patient_rate = 0.0;
    std::size_t correct_patients = 0;
    std::size_t total_patients = 0;
    Confusion confusion;
};

FoldOutcome fold_outcome(int fold_index, const EvaluationReport& report);

struct ProtocolSummary {
    std::size_t folds = 0;
    double mean_case_rate = 0.0;
    double mean_patient_rate = 0.0;
    // Total correctly diagnosed patients over total patients across folds.
    double pooled_diagnosis_accuracy = 0.0;
    std::size_t pooled_correct = 0;
    std::size_t pooled_patients = 0;
    Confusion pooled_confusion;
};

ProtocolSummary aggregate_folds(std::span<const FoldOutcome> folds);

}  // namespace histocase::metrics
