#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmclip/datagen.hpp"
#include "mmclip/model.hpp"

namespace mmclip {

/// Cosine scores: rows of unit-norm image features (B x C) against rows of
/// unit-norm prompt features (K x C).
Tensor zero_shot_scores(const Tensor& image_features, const Tensor& prompt_features);
/// Pooled image features of every record, B x C.
Tensor image_features(const Model& model, std::span<const SampleRecord> records);
/// Pooled features of the first `n_classes` disease prompts, K x C.
Tensor class_prompt_features(const Model& model, const Vocabulary& vocab, std::size_t n_classes);
Tensor zero_shot_scores(const Model& model, std::span<const SampleRecord> records,
                        const Vocabulary& vocab, std::size_t n_classes);

/// Mann-Whitney AUC, ties count one half. Throws when labels hold one class.
double auc(std::span<const double> scores, std::span<const int> labels);

struct F1Acc {
  double f1 = 0.0;
  double acc = 0.0;
};

/// Predictions are score > threshold. F1 is 1 when there are neither predicted
/// nor actual positives, and 0 when only the prediction side is empty.
F1Acc f1_acc(std::span<const double> scores, std::span<const int> labels, double threshold = 0.0);

struct EvalReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> auc;  // absent when a class has one label value
  std::vector<double> f1;
  std::vector<double> acc;
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  double macro_acc = 0.0;
  std::size_t n_samples = 0;
  std::vector<std::string> checkpoints;

  std::string to_json() const;
};

/// Per-class and macro metrics of a B x K score matrix against B x K labels.
EvalReport evaluate(const Tensor& scores, const std::vector<std::vector<int>>& labels,
                    double threshold = 0.0, std::vector<std::string> class_names = {});

/// Elementwise mean of equally shaped score matrices.
Tensor ensemble_scores(std::span<const Tensor> members);

struct ProbeConfig {
  double lr = 0.5;
  double momentum = 0.9;
  std::size_t epochs = 300;  // full-batch updates
  double train_split = 0.5;  // leading share of the records used for training
  std::uint64_t seed = 0;
};

/// Logistic multi-label head on frozen features. A `fraction` of the training
/// split is selected with the probe sub-stream; metrics are computed on the
/// held-out split at probability 0.5.
EvalReport linear_probe(const Tensor& features, const std::vector<std::vector<int>>& labels,
                        double fraction, const ProbeConfig& cfg,
                        std::vector<std::string> class_names = {});

std::vector<std::vector<int>> label_matrix(std::span<const SampleRecord> records);

}  // namespace mmclip
