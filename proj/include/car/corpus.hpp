// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multilingual speech-like corpora. Every language draws its
// grapheme subset from the 80 universal graphemes (ids 1..80, 0 = blank) and
// emits each grapheme as 2..4 noisy copies of an 80-dim prototype. Prototypes
// are either the universe's shared vectors or language-specific ones.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "car/errors.hpp"
#include "car/ops.hpp"
#include "car/tensor.hpp"
#include "car/transducer.hpp"

namespace car {

inline constexpr std::size_t kNumGraphemes = 80;
inline constexpr std::size_t kVocabSize = kNumGraphemes + 1;
inline constexpr std::size_t kFeatureDim = 80;

struct Utterance {
  std::string id;
  Tensor<float> features;  ///< [T x 80]
  Transcript transcript;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

using Corpus = std::vector<Utterance>;

struct LanguageSpec {
  std::string name = "lang";
  std::uint64_t seed = 1;
  std::vector<int> graphemes;        ///< subset of 1..80
  std::vector<Tensor<float>> prototypes;  ///< one [80] vector per grapheme, same order
  std::vector<double> transitions;   ///< row-stochastic [k x k], zero diagonal
  std::size_t min_emit = 2, max_emit = 4;
  std::size_t min_len = 3, max_len = 8;  ///< graphemes per utterance
  double sigma = 0.1;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return ops::detail::splitmix64(ops::detail::splitmix64(a) ^ (b * 0x9e3779b97f4a7c15ULL));
}

Tensor<float> random_prototype(std::mt19937_64& rng);

}  // namespace detail

/// Shared prototype of grapheme `g` in universe `universe_seed`.
inline Tensor<float> universal_prototype(std::uint64_t universe_seed, int g) {
  std::mt19937_64 rng(detail::mix_seed(universe_seed, static_cast<std::uint64_t>(g)));
  return detail::random_prototype(rng);
}

/// Knobs for building a language relative to a reference grapheme set.
struct LanguageParams {
  std::string name = "lang";
  std::uint64_t universe_seed = 7;
  std::uint64_t lang_seed = 1;
  std::size_t subset_size = 29;
  /// Fraction of the subset drawn from `reference`; the rest comes from ids
  /// outside it.
  double overlap = 1.0;
  std::vector<int> reference;
  /// Fraction of the language's graphemes that use the universal prototype;
  /// the remainder get language-specific prototypes.
  double proto_overlap = 1.0;
  double sigma = 0.1;
  std::size_t min_len = 3, max_len = 8;
};

/// ids 1..n
std::vector<int> first_graphemes(std::size_t n);

/// Builds a language from explicit graphemes.
LanguageSpec make_language(const std::string& name, std::uint64_t universe_seed, std::uint64_t lang_seed,
                           std::vector<int> graphemes, double proto_overlap, double sigma);

LanguageSpec make_language(const LanguageParams& p);

/// Utterance `index` of a language; a pure function of (spec, index).
Utterance gen_utterance(const LanguageSpec& spec, std::size_t index);

/// Utterances [first, first + n) of a language.
Corpus gen_language(const LanguageSpec& spec, std::size_t n_utts, std::size_t first = 0);

/// Number of distinct non-blank graphemes appearing in any transcript.
std::size_t grapheme_coverage(const std::vector<const Corpus*>& corpora);

inline std::size_t grapheme_coverage(const Corpus& c) { return grapheme_coverage(std::vector<const Corpus*>{&c}); }

// ----------------------------------------------------------------- file format

namespace io {

inline constexpr char kCorpusMagic[4] = {'C', 'A', 'R', 'C'};
inline constexpr std::uint32_t kCorpusVersion = 1;

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }

/// Bounds-checked little-endian reader over an in-memory buffer.
class Reader {
 public:
  Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) {
      throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) + " more)");
    }
  }
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);

void write_file(const std::string& path, const std::string& bytes);

}  // namespace io

std::string serialize_corpus(const Corpus& c);

Corpus parse_corpus(const std::string& bytes);

inline void save_corpus(const Corpus& c, const std::string& path) { io::write_file(path, serialize_corpus(c)); }
inline Corpus load_corpus(const std::string& path) { return parse_corpus(io::read_file(path)); }

}  // namespace car
