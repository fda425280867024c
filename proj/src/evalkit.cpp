#include "mmclip/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace mmclip {

using nlohmann::json;

Tensor zero_shot_scores(const Tensor& image_features, const Tensor& prompt_features) {
  if (image_features.rank() != 2 || prompt_features.rank() != 2 ||
      image_features.cols() != prompt_features.cols()) {
    throw ShapeError("zero_shot_scores: image features " + shape_str(image_features.shape()) +
                     " vs prompt features " + shape_str(prompt_features.shape()));
  }
  if (prompt_features.rows() == 0) throw Error("zero_shot_scores needs at least one class");
  return matmul_nt(image_features, prompt_features);
}

Tensor image_features(const Model& model, std::span<const SampleRecord> records) {
  if (records.empty()) throw Error("image_features: no records");
  const std::size_t c = model.config().encoder.embed_dim;
  Tensor out(Shape{records.size(), c});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Tensor f = model.image_feature(records[i].image);
    std::copy(f.data().begin(), f.data().end(), out.row(i).begin());
  }
  return out;
}

Tensor class_prompt_features(const Model& model, const Vocabulary& vocab, std::size_t n_classes) {
  const auto prompts = disease_prompts(vocab, model.config().encoder.max_text_len);
  if (n_classes == 0 || n_classes > prompts.size())
    throw Error("class count " + std::to_string(n_classes) + " outside 1.." + std::to_string(prompts.size()));
  Tensor out(Shape{n_classes, model.config().encoder.embed_dim});
  for (std::size_t k = 0; k < n_classes; ++k) {
    const Tensor f = model.text_feature(prompts[k]);
    std::copy(f.data().begin(), f.data().end(), out.row(k).begin());
  }
  return out;
}

Tensor zero_shot_scores(const Model& model, std::span<const SampleRecord> records,
                        const Vocabulary& vocab, std::size_t n_classes) {
  return zero_shot_scores(image_features(model, records),
                          class_prompt_features(model, vocab, n_classes));
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("auc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Rank sum of positives with mid-ranks for ties.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        rank_sum += mid;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("auc undefined: labels contain a single class");
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

F1Acc f1_acc(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size())
    throw ShapeError("f1_acc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  if (!std::isfinite(threshold)) throw Error("f1_acc threshold must be finite");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > threshold;
    const bool pos = labels[i] != 0;
    tp += pred && pos;
    fp += pred && !pos;
    fn += !pred && pos;
    tn += !pred && !pos;
  }
  F1Acc r;
  r.acc = scores.empty() ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  if (tp + fp == 0) {
    r.f1 = (tp + fn == 0) ? 1.0 : 0.0;
  } else {
    r.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  return r;
}

std::string EvalReport::to_json() const {
  json per = json::array();
  for (std::size_t k = 0; k < f1.size(); ++k) {
    json c = {{"class", k < class_names.size() ? class_names[k] : std::to_string(k)}};
    c["auc"] = auc[k] ? json(*auc[k]) : json(nullptr);
    c["f1"] = f1[k];
    c["acc"] = acc[k];
    per.push_back(c);
  }
  const json j = {{"per_class", per},
                  {"macro", {{"auc", macro_auc}, {"f1", macro_f1}, {"acc", macro_acc}}},
                  {"n_samples", n_samples},
                  {"checkpoints", checkpoints}};
  return j.dump(2);
}

EvalReport evaluate(const Tensor& scores, const std::vector<std::vector<int>>& labels,
                    double threshold, std::vector<std::string> class_names) {
  if (scores.rank() != 2 || scores.rows() != labels.size())
    throw ShapeError("evaluate: scores " + shape_str(scores.shape()) + " for " +
                     std::to_string(labels.size()) + " label rows");
  const std::size_t b = scores.rows(), k = scores.cols();
  EvalReport r;
  r.n_samples = b;
  r.class_names = std::move(class_names);
  double auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s(b);
    std::vector<int> l(b);
    for (std::size_t i = 0; i < b; ++i) {
      if (labels[i].size() != k) throw ShapeError("evaluate: label row of wrong length");
      s[i] = scores(i, c);
      l[i] = labels[i][c];
    }
    const bool both = std::count(l.begin(), l.end(), 1) > 0 && std::count(l.begin(), l.end(), 0) > 0;
    r.auc.push_back(both ? std::optional<double>(auc(s, l)) : std::nullopt);
    if (both) {
      auc_sum += *r.auc.back();
      ++auc_n;
    }
    const auto fa = f1_acc(s, l, threshold);
    r.f1.push_back(fa.f1);
    r.acc.push_back(fa.acc);
  }
  const double kk = static_cast<double>(k);
  r.macro_auc = auc_n ? auc_sum / static_cast<double>(auc_n) : 0.0;
  r.macro_f1 = std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / kk;
  r.macro_acc = std::accumulate(r.acc.begin(), r.acc.end(), 0.0) / kk;
  return r;
}

Tensor ensemble_scores(std::span<const Tensor> members) {
  if (members.empty()) throw Error("ensemble_scores needs at least one member");
  Tensor out(members[0].shape());
  for (const auto& m : members) {
    if (m.shape() != out.shape())
      throw ShapeError("ensemble member " + shape_str(m.shape()) + " vs " + shape_str(out.shape()));
    for (std::size_t i = 0; i < m.size(); ++i) out[i] += m[i];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (double& v : out.data()) v *= inv;
  return out;
}

std::vector<std::vector<int>> label_matrix(std::span<const SampleRecord> records) {
  std::vector<std::vector<int>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.labels);
  return out;
}

EvalReport linear_probe(const Tensor& features, const std::vector<std::vector<int>>& labels,
                        double fraction, const ProbeConfig& cfg,
                        std::vector<std::string> class_names) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("probe fraction must lie in (0, 1]");
  if (features.rank() != 2 || features.rows() != labels.size() || labels.empty())
    throw ShapeError("linear_probe: features " + shape_str(features.shape()) + " for " +
                     std::to_string(labels.size()) + " label rows");
  const std::size_t n = features.rows(), c = features.cols(), k = labels[0].size();
  const auto n_train = static_cast<std::size_t>(std::floor(cfg.train_split * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) throw Error("linear_probe: train split leaves no train or test rows");
  std::vector<std::size_t> pool(n_train);
  std::iota(pool.begin(), pool.end(), 0);
  RngStream rng = RngStream(cfg.seed).derive(Purpose::kProbe);
  const std::size_t n_sel = proportion_count(fraction, n_train);
  if (n_sel == 0) throw Error("linear_probe: fraction " + std::to_string(fraction) + " selects no samples");
  if (n_sel < k)
    throw Error("linear_probe: " + std::to_string(n_sel) + " selected samples for " +
                std::to_string(k) + " classes");
  auto sel = sample_without_replacement(rng, pool, n_sel);
  std::sort(sel.begin(), sel.end());

  // Standardise with statistics of the selected rows.
  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  for (auto i : sel)
    for (std::size_t j = 0; j < c; ++j) mean[j] += features(i, j);
  for (auto& m : mean) m /= static_cast<double>(n_sel);
  for (std::size_t j = 0; j < c; ++j) {
    double v = 0.0;
    for (auto i : sel) v += (features(i, j) - mean[j]) * (features(i, j) - mean[j]);
    inv_std[j] = 1.0 / std::sqrt(v / static_cast<double>(n_sel) + 1e-12);
  }
  auto standardized = [&](std::size_t i) {
    std::vector<double> x(c);
    for (std::size_t j = 0; j < c; ++j) x[j] = (features(i, j) - mean[j]) * inv_std[j];
    return x;
  };
  Tensor x_tr(Shape{n_sel, c});
  for (std::size_t r = 0; r < n_sel; ++r) {
    const auto x = standardized(sel[r]);
    std::copy(x.begin(), x.end(), x_tr.row(r).begin());
  }

  Tensor w(Shape{c, k}), bias(Shape{k});
  Tensor vw(Shape{c, k}), vb(Shape{k});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tensor logits = matmul(x_tr, w);
    Tensor gz(Shape{n_sel, k});
    for (std::size_t r = 0; r < n_sel; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const double p = 1.0 / (1.0 + std::exp(-(logits(r, j) + bias[j])));
        gz(r, j) = (p - labels[sel[r]][j]) / static_cast<double>(n_sel);
      }
    Tensor gw = matmul(transpose(x_tr), gz);
    Tensor gb(Shape{k});
    for (std::size_t r = 0; r < n_sel; ++r)
      for (std::size_t j = 0; j < k; ++j) gb[j] += gz(r, j);
    Tensor params[] = {std::move(w), std::move(bias)};
    const Tensor grads[] = {gw, gb};
    Tensor vel[] = {std::move(vw), std::move(vb)};
    sgd_step(params, grads, cfg.lr, cfg.momentum, vel);
    w = std::move(params[0]);
    bias = std::move(params[1]);
    vw = std::move(vel[0]);
    vb = std::move(vel[1]);
  }

  const std::size_t n_test = n - n_train;
  Tensor scores(Shape{n_test, k});
  std::vector<std::vector<int>> test_labels;
  for (std::size_t r = 0; r < n_test; ++r) {
    const auto x = standardized(n_train + r);
    for (std::size_t j = 0; j < k; ++j) {
      double z = bias[j];
      for (std::size_t q = 0; q < c; ++q) z += x[q] * w(q, j);
      scores(r, j) = z;
    }
    test_labels.push_back(labels[n_train + r]);
  }
  return evaluate(scores, test_labels, 0.0, std::move(class_names));
}

}  // namespace mmclip
