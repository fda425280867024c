// Acceptance checks. One PASS/FAIL line per criterion; exit code 1 when any
// selected criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmclip/cli.hpp"
#include "mmclip/evalkit.hpp"
#include "mmclip/trainer.hpp"

using namespace mmclip;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_matrix(RngStream& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  Tensor t(Shape{r, c});
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor unit_rows(Tensor t) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double n = 0.0;
    for (double v : t.row(r)) n += v * v;
    for (double& v : t.row(r)) v /= std::sqrt(n);
  }
  return t;
}

// ---- 1 ----------------------------------------------------------------------

Outcome mask_algebra() {
  const auto t0 = std::chrono::steady_clock::now();
  RngStream rng(101);
  std::size_t topk_bad = 0, union_bad = 0, final_bad = 0;
  const double lambda2s[] = {0.0, 0.25, 0.5, 0.75, 1.0};
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 1 + rng.below(32), c = 1 + rng.below(16);
    const double lambda1 = rng.uniform();
    // integer grid values so that ties show up
    Tensor a(Shape{n, c});
    for (double& v : a.data()) v = inst % 4 == 0 ? static_cast<double>(rng.below(3)) : rng.normal();

    std::vector<std::pair<double, std::size_t>> keyed;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += a(i, j) * a(i, j);
      keyed.emplace_back(-std::sqrt(s), i);
    }
    std::sort(keyed.begin(), keyed.end());
    const auto k = static_cast<std::size_t>(std::llround(lambda1 * static_cast<double>(n)));
    std::set<std::size_t> want;
    for (std::size_t i = 0; i < k; ++i) want.insert(keyed[i].second);
    const TokenMask got = topk_mask(a, lambda1);
    if (std::vector<std::size_t>(want.begin(), want.end()) != got.masked) ++topk_bad;

    std::vector<TokenMask> parts;
    std::set<std::size_t> uni;
    const std::size_t n_parts = 1 + rng.below(3);
    for (std::size_t p = 0; p < n_parts; ++p) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < n; ++i)
        if (rng.bernoulli(0.3)) idx.push_back(i);
      uni.insert(idx.begin(), idx.end());
      parts.push_back(TokenMask::from_indices(n, idx, MaskProvenance::kPrompt));
    }
    const TokenMask blended = blend_masks(parts);
    if (std::vector<std::size_t>(uni.begin(), uni.end()) != blended.masked) ++union_bad;

    for (double l2 : lambda2s) {
      RngStream draw = rng.derive(Purpose::kMask, static_cast<std::uint64_t>(inst),
                                  static_cast<std::uint64_t>(l2 * 4));
      const TokenMask fin = final_mask(blended, l2, draw);
      const auto want_size = static_cast<std::size_t>(std::llround(l2 * static_cast<double>(n)));
      bool ok = fin.size() == want_size;
      // drawn inside the blend first, topped up from outside only when needed
      std::size_t inside = 0;
      for (auto i : fin.masked) inside += uni.count(i);
      ok = ok && inside == std::min(want_size, uni.size());
      if (!ok) ++final_bad;
    }
  }
  const double sec = seconds_since(t0);
  Outcome o;
  o.pass = topk_bad == 0 && union_bad == 0 && final_bad == 0 && sec < 10.0;
  o.detail = "topk mismatches " + std::to_string(topk_bad) + ", union mismatches " +
             std::to_string(union_bad) + ", final-size mismatches " + std::to_string(final_bad) +
             ", " + fmt(sec, 2) + " s (limit 10 s)";
  return o;
}

// ---- shared toy model ---------------------------------------------------------

const Corpus& toy_corpus() {
  static const Corpus c = [] {
    CorpusSpec s;
    s.n_paired = 4;
    s.n_unpaired = 4;
    s.image_size = 16;
    s.prevalence = 0.6;
    s.filler_prob = 0.0;
    s.max_text_len = 12;
    s.seed = 17;
    return generate_corpus(s);
  }();
  return c;
}

ModelConfig toy_model_config(const Corpus& c) {
  ModelConfig m;
  m.encoder.image_size = 16;
  m.encoder.patch_size = 4;
  m.encoder.embed_dim = 8;
  m.encoder.n_layers = 1;
  m.encoder.n_heads = 2;
  m.encoder.max_text_len = 12;
  m.encoder.vocab_size = c.vocab.size();
  m.decoder.decoder_dim = 8;
  m.decoder.image_decoder_layers = 1;
  m.decoder.text_decoder_layers = 1;
  m.decoder.n_heads = 2;
  m.learn_temperature = true;
  m.temperature = 0.5;
  m.init_seed = 23;
  return m;
}

// Moves every weight off its small init so that no gradient is vanishingly
// small next to finite-difference noise.
void perturb(ParamStore& ps, std::uint64_t seed, double amount) {
  RngStream rng(seed);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (double& v : ps.value(i).data()) v += rng.uniform(-amount, amount);
}

// ---- 2 ----------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const Corpus& c = toy_corpus();
  Model m(toy_model_config(c));
  perturb(m.params, 5, 0.3);

  std::vector<SampleInput> batch;
  RngStream pick(7);
  for (std::size_t i = 0; i < c.records.size() && batch.size() < 2; ++i) {
    const auto& r = c.records[i];
    if (!r.paired) continue;
    const auto ents = recognize_entities(*r.report, c.lexicon, c.vocab);
    if (ents.empty()) continue;
    SampleInput s{&r, {}, {}, i};
    s.image_mask = random_mask(m.config().encoder.n_patches(), 0.5, pick);
    s.entity_mask = entity_mask(ents, r.report->size(), 1.0, pick);
    batch.push_back(s);
  }
  if (batch.size() < 2) return {false, "toy corpus lacks two paired samples with entities"};
  const Tensor e_prompt = prompt_features(m, c.vocab);

  struct Term {
    const char* name;
    ObjectiveOptions opt;
  };
  auto opts = [](bool align, MimMode mim, MlmMode mlm) {
    ObjectiveOptions o;
    o.use_align = align;
    o.mim_mode = mim;
    o.mlm_mode = mlm;
    return o;
  };
  const std::vector<Term> terms{
      {"align", opts(true, MimMode::kNone, MlmMode::kNone)},
      {"mim", opts(false, MimMode::kRandom, MlmMode::kNone)},
      {"mlm", opts(false, MimMode::kNone, MlmMode::kEntity)},
      {"pair", opts(true, MimMode::kRandom, MlmMode::kEntity)},
  };

  std::ostringstream detail;
  double worst = 0.0;
  for (const auto& term : terms) {
    double term_worst = 0.0;
    for (std::size_t p = 0; p < m.params.size(); ++p) {
      const auto loss = [&](Tape& tape, Var v) {
        Binding b = bind(tape, m.params, false);
        b[p] = v;
        return batch_objective(m, b, c, batch, term.opt, &e_prompt, RngStream(3)).total;
      };
      term_worst = std::max(term_worst, finite_diff_check(loss, m.params.value(p), 2e-5));
    }
    worst = std::max(worst, term_worst);
    detail << term.name << " " << std::scientific << std::setprecision(2) << term_worst << ", ";
  }
  const double sec = seconds_since(t0);
  detail << "params " << m.params.numel() << ", " << fmt(sec, 1) << " s (limits 1e-4, 60 s)";
  return {worst < 1e-4 && sec < 60.0, "max rel err " + detail.str()};
}

// ---- 3 ----------------------------------------------------------------------

Outcome loss_identities() {
  RngStream rng(31);
  std::ostringstream d;
  bool pass = true;

  Tape t1;
  const Tensor x1 = unit_rows(random_matrix(rng, 1, 6)), y1 = unit_rows(random_matrix(rng, 1, 6));
  const double single = loss_align(t1.constant(x1), t1.constant(y1), 0.07).value().item();
  pass = pass && single == 0.0;
  d << "align(B=1) " << single;

  Tape t2;
  Tensor same(Shape{4, 6});
  const Tensor row = unit_rows(random_matrix(rng, 1, 6));
  for (std::size_t r = 0; r < 4; ++r) std::copy(row.data().begin(), row.data().end(), same.row(r).begin());
  const double four = loss_align(t2.constant(same), t2.constant(same), 0.07).value().item();
  pass = pass && std::abs(four - 2.0 * std::log(4.0)) <= 1e-9;
  d << ", align(identical B=4) - 2 ln 4 = " << std::scientific << std::setprecision(1)
    << four - 2.0 * std::log(4.0);

  const std::size_t vocab = 37;
  Tape t3;
  const Tensor flat(Shape{6, vocab}, 0.25);
  TokenSeq targets;
  for (std::size_t i = 0; i < 6; ++i) {
    targets.ids.push_back(5 + rng.below(vocab - 5));
    targets.pad_mask.push_back(1);
  }
  const std::vector<std::size_t> pos{1, 2, 4};
  const double mlm = loss_mlm(t3.constant(flat), targets, pos).loss.value().item();
  pass = pass && std::abs(mlm - std::log(static_cast<double>(vocab))) <= 1e-9;
  d << ", mlm(uniform) - ln V = " << mlm - std::log(static_cast<double>(vocab));

  Tape t4;
  const Tensor target = random_matrix(rng, 16, 64);
  const auto mask = TokenMask::from_indices(16, {0, 3, 9, 15}, MaskProvenance::kRandom);
  const double mim = loss_mim(t4.constant(target), target, mask).loss.value().item();
  pass = pass && mim == 0.0;
  d << ", mim(exact) " << std::defaultfloat << mim;
  return {pass, d.str()};
}

// ---- 4 ----------------------------------------------------------------------

Outcome unpaired_isolation() {
  const Corpus& c = toy_corpus();
  Model m(toy_model_config(c));
  perturb(m.params, 8, 0.1);
  std::vector<SampleInput> batch;
  for (std::size_t i = 0; i < c.records.size(); ++i)
    if (!c.records[i].paired) batch.push_back({&c.records[i], {}, {}, i});
  const Tensor e_prompt = prompt_features(m, c.vocab);
  Tape tape;
  const Binding b = bind(tape, m.params);
  ObjectiveOptions opt;  // AttMIM + EntMLM + align, joint phase
  auto obj = batch_objective(m, b, c, batch, opt, &e_prompt, RngStream(4));
  bool absent = !obj.align.has_value();
  for (const auto& bd : obj.bundles) absent = absent && !bd.align && !bd.mlm && !bd.paired;
  tape.backward(obj.total);
  std::size_t checked = 0, nonzero = 0, image_side_moving = 0;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& name = m.params.name(i);
    const Tensor g = tape.grad(b[i]);
    if (name.rfind("text_decoder", 0) == 0 || name == "log_temperature") {
      ++checked;
      for (double v : g.data()) nonzero += v != 0.0;
    } else if (name.rfind("image_decoder", 0) == 0) {
      for (double v : g.data()) image_side_moving += v != 0.0;
    }
  }
  Outcome o;
  o.pass = absent && nonzero == 0 && checked > 1 && image_side_moving > 0 && batch.size() == 4;
  o.detail = std::to_string(batch.size()) + " unpaired samples, align/mlm absent: " +
             (absent ? "yes" : "no") + ", nonzero entries over " + std::to_string(checked) +
             " text-decoder/temperature tensors: " + std::to_string(nonzero);
  return o;
}

// ---- 5 ----------------------------------------------------------------------

Outcome entity_visibility() {
  const Corpus& c = toy_corpus();
  Model m(toy_model_config(c));
  perturb(m.params, 9, 0.3);
  const auto& dec = m.text_decoder;
  RngStream rng(55);
  double worst_entity = 0.0, worst_prefix = 0.0;
  std::size_t causal_breaks = 0, dead_positions = 0;
  const std::size_t n = 12;

  for (int rep = 0; rep < 20; ++rep) {
    TokenSeq seq;
    for (std::size_t i = 0; i < n; ++i) {
      seq.ids.push_back(5 + rng.below(c.vocab.size() - 5));
      seq.pad_mask.push_back(1);
    }
    const Tensor& img = c.records[rng.below(c.records.size())].image;
    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < n; ++i)
      if (rng.bernoulli(0.25)) chosen.push_back(i);
    if (chosen.empty()) chosen.push_back(rng.below(n));
    const auto ent = TokenMask::from_indices(n, chosen, MaskProvenance::kEntity);
    const AttnMatrix attn = combine_masks(causal_mask(n), ent);

    auto decode = [&](const std::function<Tensor(const Tensor&)>& edit_report, bool masked) {
      Tape tape;
      const Binding b = bind(tape, m.params, false);
      const Tensor e_report = edit_report(m.text_encoder.encode(b, seq).value());
      const Var e_img = m.image_encoder.encode(b, img);
      const Var input = masked ? dec.mask_input(b, tape.constant(e_report), ent) : tape.constant(e_report);
      return dec.decode(b, input, masked ? attn : causal_mask(n), e_img).value();
    };
    const auto keep = [](const Tensor& t) { return t; };

    // entity rows: perturb the original embedding of one masked token
    const Tensor base = decode(keep, true);
    for (auto target : ent.masked) {
      const Tensor moved = decode(
          [&](const Tensor& t) {
            Tensor u = t;
            for (double& v : u.row(target)) v += rng.uniform(-3.0, 3.0);
            return u;
          },
          true);
      for (std::size_t r = 0; r < n; ++r) {
        if (r == target) continue;
        for (std::size_t k = 0; k < base.cols(); ++k)
          worst_entity = std::max(worst_entity, std::abs(moved(r, k) - base(r, k)));
      }
    }

    // prefix causality: perturbing position t leaves every earlier row alone
    const Tensor plain = decode(keep, false);
    for (std::size_t t = 0; t < n; ++t) {
      const Tensor moved = decode(
          [&](const Tensor& e) {
            Tensor u = e;
            for (double& v : u.row(t)) v += rng.uniform(-3.0, 3.0);
            return u;
          },
          false);
      double own = 0.0;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < plain.cols(); ++k) {
          const double diff = std::abs(moved(r, k) - plain(r, k));
          if (r < t) worst_prefix = std::max(worst_prefix, diff);
          if (r == t) own = std::max(own, diff);
        }
      if (worst_prefix > 1e-9) ++causal_breaks;
      if (own == 0.0) ++dead_positions;
    }
  }
  Outcome o;
  o.pass = worst_entity <= 1e-9 && worst_prefix <= 1e-9 && dead_positions == 0;
  std::ostringstream d;
  d << std::scientific << std::setprecision(1) << "max change at other positions " << worst_entity
    << ", max change before the perturbed position " << worst_prefix
    << " (tol 1e-9), 20 sequences of 12 tokens";
  o.detail = d.str();
  return o;
}

// ---- 6 ----------------------------------------------------------------------

Outcome auc_oracle() {
  RngStream rng(66);
  std::size_t mismatches = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 2 + rng.below(49);
    std::vector<double> s(n);
    std::vector<int> l(n);
    const bool coarse = inst % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(rng.below(5)) * 0.25 : rng.normal();
      l[i] = static_cast<int>(rng.below(2));
    }
    // auc needs both label values
    if (std::count(l.begin(), l.end(), 1) == 0) l[0] = 1;
    if (std::count(l.begin(), l.end(), 0) == 0) l[n - 1] = 0;
    // exhaustive oracle in integer half-units
    long long wins2 = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (l[i] == 1 && l[j] == 0) {
          wins2 += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
          ++pairs;
        }
    const double oracle = static_cast<double>(wins2) / static_cast<double>(2 * pairs);
    if (auc(s, l) != oracle) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 1000 instances differ from the pairwise oracle (exact compare)"};
}

// ---- 7, 8, 9 ----------------------------------------------------------------

struct ArmResult {
  double zs_auc = 0.0;
  double probe_acc = 0.0;
};

struct ArmSpec {
  const char* name;
  MimMode mim;
  MlmMode mlm;
  double unpaired_fraction;
  std::size_t warmup;
};

CorpusSpec ablation_corpus(std::uint64_t seed) {
  CorpusSpec s;
  s.n_paired = 2000;
  s.n_unpaired = 1000;
  s.seed = seed;
  return s;
}

ArmResult run_arm(const ArmSpec& arm, std::uint64_t seed, const Corpus& train, const Corpus& eval) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.mim_mode = arm.mim;
  cfg.mlm_mode = arm.mlm;
  cfg.unpaired_fraction = arm.unpaired_fraction;
  cfg.warmup_iters = arm.warmup;
  cfg.total_iters = 1500;
  Trainer tr(cfg, train);
  while (!tr.finished()) tr.step();
  ArmResult r;
  const auto labels = label_matrix(eval.records);
  r.zs_auc = evaluate(zero_shot_scores(tr.model(), eval.records, eval.vocab, eval.n_classes), labels).macro_auc;
  ProbeConfig pc;
  pc.seed = seed;
  r.probe_acc = linear_probe(image_features(tr.model(), eval.records), labels, 0.1, pc).macro_acc;
  return r;
}

struct Ablation {
  // arm -> per-seed results
  std::vector<std::vector<ArmResult>> results;
  std::vector<ArmSpec> arms;
  std::vector<double> minutes;
};

Ablation run_ablation(std::size_t n_seeds) {
  Ablation ab;
  ab.arms = {
      {"contrastive", MimMode::kNone, MlmMode::kNone, 0.25, 0},
      {"random-mim", MimMode::kRandom, MlmMode::kNone, 0.25, 300},
      {"attmim", MimMode::kAttention, MlmMode::kNone, 0.25, 300},
      {"attmim+entmlm", MimMode::kAttention, MlmMode::kEntity, 0.25, 300},
      {"attmim+entmlm paired-only", MimMode::kAttention, MlmMode::kEntity, 0.0, 300},
  };
  ab.results.assign(ab.arms.size(), {});
  ab.minutes.assign(ab.arms.size(), 0.0);
  for (std::size_t s = 1; s <= n_seeds; ++s) {
    const Corpus train = generate_corpus(ablation_corpus(s));
    CorpusSpec es = ablation_corpus(s + 1000);
    es.n_paired = 0;
    const Corpus eval = generate_corpus(es);
    for (std::size_t a = 0; a < ab.arms.size(); ++a) {
      const auto t0 = std::chrono::steady_clock::now();
      ab.results[a].push_back(run_arm(ab.arms[a], s, train, eval));
      ab.minutes[a] += seconds_since(t0) / 60.0;
      std::cerr << "  seed " << s << " " << ab.arms[a].name << ": zero-shot AUC "
                << fmt(ab.results[a].back().zs_auc) << ", probe ACC@0.1 "
                << fmt(ab.results[a].back().probe_acc) << "\n";
    }
  }
  return ab;
}

std::string list(const std::vector<ArmResult>& rs, bool acc = false) {
  std::string out;
  for (const auto& r : rs) out += (out.empty() ? "" : "/") + fmt(acc ? r.probe_acc : r.zs_auc, 3);
  return out;
}

Outcome ordering(const Ablation& ab) {
  const auto &a = ab.results[0], &b = ab.results[1], &c = ab.results[2];
  std::size_t ordered = 0;
  double margin = 0.0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    ordered += a[s].zs_auc < b[s].zs_auc && b[s].zs_auc < c[s].zs_auc;
    margin += (c[s].zs_auc - b[s].zs_auc) / static_cast<double>(a.size());
  }
  const double minutes = ab.minutes[0] + ab.minutes[1] + ab.minutes[2];
  Outcome o;
  o.pass = ordered >= 2 && margin >= 0.01;
  o.detail = "ordered in " + std::to_string(ordered) + "/" + std::to_string(a.size()) +
             " seeds, attmim - random " + fmt(margin) + " (need 2 seeds, +0.01); AUC contrastive " +
             list(a) + ", random " + list(b) + ", attmim " + list(c) + "; " + fmt(minutes, 1) + " min";
  return o;
}

Outcome entmlm_effect(const Ablation& ab) {
  const auto &c = ab.results[2], &d = ab.results[3];
  std::size_t improved = 0;
  double mean_diff = 0.0;
  for (std::size_t s = 0; s < c.size(); ++s) {
    improved += d[s].zs_auc > c[s].zs_auc;
    mean_diff += (d[s].zs_auc - c[s].zs_auc) / static_cast<double>(c.size());
  }
  Outcome o;
  o.pass = mean_diff >= -0.005 && improved >= 2;
  o.detail = "improved in " + std::to_string(improved) + "/" + std::to_string(c.size()) +
             " seeds, mean change " + fmt(mean_diff) + " (need 2 seeds, >= -0.005); AUC attmim " +
             list(c) + ", +entmlm " + list(d);
  return o;
}

Outcome unpaired_benefit(const Ablation& ab) {
  const auto &with = ab.results[3], &without = ab.results[4];
  std::size_t wins = 0;
  for (std::size_t s = 0; s < with.size(); ++s) wins += with[s].probe_acc >= without[s].probe_acc;
  Outcome o;
  o.pass = wins >= 2;
  o.detail = "probe ACC@0.1 with unpaired >= paired-only in " + std::to_string(wins) + "/" +
             std::to_string(with.size()) + " seeds; with " + list(with, true) + ", paired-only " +
             list(without, true);
  return o;
}

// ---- 10 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "spec.json") << R"({"n_paired": 200, "n_unpaired": 100})";
  std::ofstream(dir / "train.json") << R"({"warmup_iters": 20, "total_iters": 100})";
  for (const char* tag : {"a", "b"}) {
    const fs::path base = dir / tag;
    std::ostringstream out, err;
    const std::vector<std::vector<std::string>> steps{
        {"mmclip", "--seed", "7", "gen-data", "--spec", (dir / "spec.json").string(), "--out",
         (base / "corpus").string()},
        {"mmclip", "--seed", "7", "pretrain", "--config", (dir / "train.json").string(), "--corpus",
         (base / "corpus").string(), "--out", (base / "run").string()},
        {"mmclip", "zeroshot", "--ckpt", (base / "run" / "model.mmck").string(), "--corpus",
         (base / "corpus").string(), "--out", (base / "zs").string()},
    };
    for (const auto& args : steps)
      if (cli::run(args, out, err) != 0) return {false, "pipeline step " + args[3] + " failed: " + err.str()};
  }
  const std::string csv_a = slurp(dir / "a" / "run" / "metrics.csv");
  const std::string csv_b = slurp(dir / "b" / "run" / "metrics.csv");
  const std::string rep_a = slurp(dir / "a" / "zs" / "report.json");
  const std::string rep_b = slurp(dir / "b" / "zs" / "report.json");
  const bool rows = std::count(csv_a.begin(), csv_a.end(), '\n') == 101;
  Outcome o;
  o.pass = rows && !rep_a.empty() && csv_a == csv_b && rep_a == rep_b;
  o.detail = std::string("metrics.csv ") + (csv_a == csv_b ? "identical" : "differs") + " (" +
             std::to_string(csv_a.size()) + " bytes), report.json " +
             (rep_a == rep_b ? "identical" : "differs") + " (" + std::to_string(rep_a.size()) + " bytes)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work = (fs::temp_directory_path() / "mmclip_acceptance").string();
  std::vector<int> only;
  std::size_t seeds = 3;
  app.add_option("workdir", work, "scratch directory");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--seeds", seeds, "seeds for the ablation criteria")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  auto wanted = [&](int k) { return only.empty() || std::count(only.begin(), only.end(), k) > 0; };
  int failures = 0;
  auto report = [&](int k, const char* what, const Outcome& o) {
    std::cout << "criterion " << std::setw(2) << k << " " << (o.pass ? "PASS" : "FAIL") << "  " << what
              << ": " << o.detail << std::endl;
    failures += !o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("threw: ") + e.what()};
    }
  };

  if (wanted(1)) report(1, "mask algebra", guarded(mask_algebra));
  if (wanted(2)) report(2, "gradient check", guarded(gradients));
  if (wanted(3)) report(3, "loss identities", guarded(loss_identities));
  if (wanted(4)) report(4, "unpaired isolation", guarded(unpaired_isolation));
  if (wanted(5)) report(5, "entity visibility and causality", guarded(entity_visibility));
  if (wanted(6)) report(6, "auc oracle", guarded(auc_oracle));
  if (wanted(7) || wanted(8) || wanted(9)) {
    Ablation ab;
    std::string error;
    try {
      ab = run_ablation(seeds);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto from = [&](Outcome (*f)(const Ablation&)) {
      return error.empty() ? f(ab) : Outcome{false, "ablation threw: " + error};
    };
    if (wanted(7)) report(7, "ablation ordering", from(ordering));
    if (wanted(8)) report(8, "entmlm effect", from(entmlm_effect));
    if (wanted(9)) report(9, "unpaired benefit", from(unpaired_benefit));
  }
  if (wanted(10)) report(10, "determinism", guarded([&] { return determinism(work); }));
  return failures == 0 ? 0 : 1;
}
