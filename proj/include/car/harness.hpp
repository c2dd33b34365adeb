// SPDX-License-Identifier: Apache-2.0
//
// Training, evaluation, checkpoints, configuration and the toy studies.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "car/corpus.hpp"
#include "car/errors.hpp"
#include "car/model.hpp"
#include "car/peft.hpp"
#include "json.hpp"

namespace car {

using Json = nlohmann::ordered_json;

// ----------------------------------------------------------------- config

namespace cfgio {

/// Rejects keys outside `allowed` so typos surface as configuration errors.
void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed);

template <class V>
void read(const Json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace cfgio

Json to_json(const ModelConfig& c);

ModelConfig model_from_json(const Json& j, ModelConfig c = {});

Json to_json(const Insertions& in);

Insertions insertions_from_json(const Json& j);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& s);

inline std::uint64_t config_digest(const ModelConfig& c) { return fnv1a(to_json(c).dump()); }

// ----------------------------------------------------------------- optimizer

enum class Schedule { kConstant, kInverseSqrt };

struct TrainConfig {
  std::string scheme = "F0";
  double lr = 3e-3;
  Schedule schedule = Schedule::kConstant;
  std::size_t warmup = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t steps = 300;
  std::uint64_t seed = 1;
  /// Global gradient-norm clip; 0 disables.
  double clip = 5.0;
  /// Learning rate of weight- and bias-role entries when > 0; inserted
  /// modules (reprogram, adapter, probe roles) always use `lr`.
  double backbone_lr = 0.0;

  void validate() const {
    if (!(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1)) {
      throw ConfigError("adam betas must lie in (0, 1)");
    }
    if (steps < 1 && steps != 0) throw ConfigError("steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (backbone_lr < 0) throw ConfigError("backbone_lr must be >= 0");
    if (schedule == Schedule::kInverseSqrt && warmup < 1) throw ConfigError("warmup must be >= 1");
  }

  double lr_at(std::size_t step) const {
    if (schedule == Schedule::kConstant) return lr;
    const double s = static_cast<double>(step), w = static_cast<double>(warmup);
    return lr * std::min(s / w, std::sqrt(w / s));
  }
};

Json to_json(const TrainConfig& t);

TrainConfig train_from_json(const Json& j, TrainConfig t = {});

struct AdamState {
  std::size_t t = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

inline bool is_backbone_role(Role r) { return r == Role::kWeight || r == Role::kBias; }

/// One bias-corrected Adam update of every trainable entry. Frozen entries
/// are never read or written, whatever their gradient buffers hold. `lr` is
/// the scheduled rate; backbone-role entries scale it by backbone_lr / lr.
template <std::floating_point T>
void adam_step(ParamStore<T>& s, AdamState& st, const TrainConfig& cfg, double lr) {
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.t));
  for (auto& e : s.entries()) {
    if (!e.trainable) continue;
    const double rate = cfg.backbone_lr > 0 && is_backbone_role(e.role) ? lr * cfg.backbone_lr / cfg.lr : lr;
    auto& [m, v] = st.moments[e.name];
    if (m.empty()) {
      m.assign(e.value.size(), 0.0);
      v.assign(e.value.size(), 0.0);
    }
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = static_cast<double>(e.grad[i]);
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
      const double update = rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
      e.value[i] = static_cast<T>(static_cast<double>(e.value[i]) - update);
    }
  }
}

// ----------------------------------------------------------------- training

struct TrainResult {
  std::vector<double> loss_trace;  ///< mean batch loss per step
};

/// Minibatch training of the trainable entries of `s`. Deterministic given
/// the config seed. A non-finite loss aborts with the step and utterance.
TrainResult train(const TrainConfig& cfg, const ModelConfig& mc, const Insertions& ins, const Corpus& data,
                  ParamStore<float>& s, std::ostream* log = nullptr);

// ----------------------------------------------------------------- scoring

/// Token-level Levenshtein distance.
std::size_t edit_distance(const Transcript& ref, const Transcript& hyp);

/// Sum of edit distances over sum of reference lengths.
double word_error_rate(const std::vector<Transcript>& refs, const std::vector<Transcript>& hyps);

double evaluate_wer(ParamStore<float>& s, const ModelConfig& mc, const Insertions& ins, const Corpus& data);

// ----------------------------------------------------------------- checkpoints

struct Checkpoint {
  ModelConfig model;
  Insertions ins;
  std::string scheme = "F0";
  ParamStore<float> store;
};

namespace io {

inline constexpr char kCheckpointMagic[4] = {'C', 'A', 'R', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace io

/// Layout: magic, version u32, digest u64 (FNV-1a of the model config JSON),
/// blank id u32, header JSON (length u32 + bytes), entry count u32, then per
/// entry: name, role u8, trainable u8, rank u32, dims u32..., float32 data.
std::string serialize_checkpoint(const Checkpoint& c);

Checkpoint parse_checkpoint(const std::string& bytes);

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { io::write_file(path, serialize_checkpoint(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(io::read_file(path)); }

/// Digest of the checkpoint's model config compared with `expected`;
/// mismatches are reported, not fatal.
bool digest_matches(const Checkpoint& c, const ModelConfig& expected, std::ostream* warn);

// ----------------------------------------------------------------- adaptation

/// Copy of `base` with the scheme applied: modules inserted, head policy
/// applied, trainable flags set.
Checkpoint prepare_adaptation(const Checkpoint& base, const std::string& scheme_id, std::uint64_t seed);

// ----------------------------------------------------------------- studies

struct StudyConfig {
  ModelConfig model;
  std::uint64_t universe_seed = 7;
  double sigma = 0.1;
  std::size_t pretrain_utts = 2000;
  std::size_t adapt_utts = 300;
  std::size_t test_utts = 100;
  std::size_t target_languages = 2;
  TrainConfig pretrain;
  TrainConfig adapt;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  /// Empty = the study's default scheme list.
  std::vector<std::string> schemes;
  /// Pretrained checkpoint(s): study 2 takes "single,mixed".
  std::string pretrained;

  StudyConfig() {
    pretrain.schedule = Schedule::kInverseSqrt;
    pretrain.lr = 3e-3;
    pretrain.warmup = 200;
    pretrain.steps = 2000;
    pretrain.batch_size = 8;
    adapt.lr = 3e-3;
    adapt.backbone_lr = 1e-3;
    adapt.steps = 600;
    adapt.batch_size = 8;
  }
};

Json to_json(const StudyConfig& c);

StudyConfig study_from_json(const Json& j, StudyConfig c = {});

struct ReportRow {
  std::string label;
  std::vector<double> wers;  ///< one per seed (macro-averaged over target languages)
  std::size_t trainable = 0;
  std::size_t total = 0;
  std::size_t backbone = 0;
  std::optional<std::size_t> coverage;

  double mean() const { return std::accumulate(wers.begin(), wers.end(), 0.0) / static_cast<double>(wers.size()); }
  double stdev() const {
    if (wers.size() < 2) return 0.0;
    const double m = mean();
    double s = 0;
    for (double w : wers) s += (w - m) * (w - m);
    return std::sqrt(s / static_cast<double>(wers.size() - 1));
  }
  double median() const {
    auto v = wers;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

struct ExperimentReport {
  std::string title;
  std::vector<ReportRow> rows;
  std::vector<std::string> notes;

  const ReportRow& row(const std::string& label) const {
    for (const auto& r : rows)
      if (r.label == label) return r;
    throw ContractError("report has no row '" + label + "'");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << title << "\n";
    std::size_t w = 6;
    for (const auto& r : rows) w = std::max(w, r.label.size());
    os << std::left << std::setw(static_cast<int>(w)) << "scheme" << std::right << std::setw(18) << "WER % (mean+-sd)"
       << std::setw(10) << "median" << std::setw(12) << "trainable" << std::setw(12) << "total" << std::setw(9)
       << "train %" << std::setw(10) << "coverage" << "\n";
    for (const auto& r : rows) {
      std::ostringstream wer;
      wer << std::fixed << std::setprecision(1) << 100 * r.mean() << " +- " << 100 * r.stdev();
      os << std::left << std::setw(static_cast<int>(w)) << r.label << std::right << std::setw(18) << wer.str()
         << std::setw(10) << std::fixed << std::setprecision(1) << 100 * r.median() << std::setw(12) << r.trainable
         << std::setw(12) << r.total << std::setw(9) << std::setprecision(2)
         << (r.backbone ? 100.0 * static_cast<double>(r.trainable) / static_cast<double>(r.backbone) : 0.0)
         << std::setw(10) << (r.coverage ? std::to_string(*r.coverage) + "/80" : std::string("-")) << "\n";
    }
    for (const auto& n : notes) os << "# " << n << "\n";
    return os.str();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "scheme,wer_mean,wer_stdev,wer_median,trainable_params,total_params,backbone_params,coverage";
    const std::size_t seeds = rows.empty() ? 0 : rows[0].wers.size();
    for (std::size_t i = 0; i < seeds; ++i) os << ",wer_seed" << i;
    os << "\n" << std::setprecision(6);
    for (const auto& r : rows) {
      os << r.label << "," << r.mean() << "," << r.stdev() << "," << r.median() << "," << r.trainable << ","
         << r.total << "," << r.backbone << "," << (r.coverage ? std::to_string(*r.coverage) : "");
      for (double w : r.wers) os << "," << w;
      os << "\n";
    }
    return os.str();
  }
};

/// Languages used by the studies.
struct StudyLanguages {
  LanguageSpec source;               ///< pretraining language A
  LanguageSpec second;               ///< B, mixed into pretraining in study 2
  std::vector<LanguageSpec> targets;  ///< adaptation targets
};

StudyLanguages study_languages(int study, const StudyConfig& c);

std::vector<std::string> default_schemes(int study);

/// Held-out utterances start far past any training index.
inline constexpr std::size_t kTestOffset = 1'000'000;

Checkpoint pretrain_model(const ModelConfig& mc, const TrainConfig& tc, const Corpus& data,
                          std::ostream* log = nullptr, TrainResult* trace = nullptr);

/// WER of one (pretrained model, scheme, seed) cell, macro-averaged over
/// the target languages.
double adapt_and_score(const Checkpoint& base, const std::string& scheme, std::uint64_t seed,
                       const StudyConfig& c, const std::vector<LanguageSpec>& targets, BudgetReport* budget);

std::vector<std::string> split_csv(const std::string& s);

ExperimentReport run_study(int study, StudyConfig c, std::ostream* log = nullptr);

}  // namespace car
