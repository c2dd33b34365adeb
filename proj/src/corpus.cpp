// SPDX-License-Identifier: Apache-2.0
#include "car/corpus.hpp"

namespace car {

namespace detail {

Tensor<float> random_prototype(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Tensor<float> p({kFeatureDim});
  for (auto& v : p.data()) v = static_cast<float>(d(rng));
  return p;
}

}  // namespace detail

std::vector<int> first_graphemes(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i + 1);
  return v;
}

LanguageSpec make_language(const std::string& name, std::uint64_t universe_seed, std::uint64_t lang_seed,
                           std::vector<int> graphemes, double proto_overlap, double sigma) {
  if (graphemes.empty()) throw ContractError("language '" + name + "' has an empty grapheme subset");
  if (graphemes.size() < 2) throw ContractError("language '" + name + "' needs at least two graphemes");
  for (int g : graphemes) {
    if (g < 1 || g > static_cast<int>(kNumGraphemes)) throw ContractError("grapheme id out of range 1..80");
  }
  if (proto_overlap < 0.0 || proto_overlap > 1.0) throw ConfigError("proto_overlap must lie in [0, 1]");
  if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
  LanguageSpec spec;
  spec.name = name;
  spec.seed = lang_seed;
  spec.sigma = sigma;
  spec.graphemes = std::move(graphemes);
  const std::size_t k = spec.graphemes.size();
  const auto shared = static_cast<std::size_t>(std::lround(proto_overlap * static_cast<double>(k)));
  std::mt19937_64 rng(detail::mix_seed(lang_seed, 0x70726f74ULL));
  for (std::size_t i = 0; i < k; ++i) {
    if (i < shared) {
      spec.prototypes.push_back(universal_prototype(universe_seed, spec.graphemes[i]));
    } else {
      spec.prototypes.push_back(detail::random_prototype(rng));
    }
  }
  std::uniform_real_distribution<double> w(0.1, 1.0);
  spec.transitions.assign(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      spec.transitions[i * k + j] = w(rng);
      z += spec.transitions[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) spec.transitions[i * k + j] /= z;
  }
  return spec;
}

LanguageSpec make_language(const LanguageParams& p) {
  if (p.subset_size == 0) throw ContractError("language '" + p.name + "' has an empty grapheme subset");
  if (p.overlap < 0.0 || p.overlap > 1.0) throw ConfigError("overlap must lie in [0, 1]");
  if (p.subset_size > kNumGraphemes) throw ConfigError("subset_size exceeds the 80 universal graphemes");
  std::mt19937_64 rng(detail::mix_seed(p.lang_seed, 0x73756273ULL));
  std::vector<int> inside = p.reference, outside;
  std::set<int> ref(p.reference.begin(), p.reference.end());
  for (int g = 1; g <= static_cast<int>(kNumGraphemes); ++g)
    if (!ref.count(g)) outside.push_back(g);
  std::shuffle(inside.begin(), inside.end(), rng);
  std::shuffle(outside.begin(), outside.end(), rng);
  auto n_in = static_cast<std::size_t>(std::lround(p.overlap * static_cast<double>(p.subset_size)));
  n_in = std::min(n_in, inside.size());
  const std::size_t n_out = p.subset_size - n_in;
  if (n_out > outside.size()) throw ConfigError("not enough graphemes outside the reference set");
  std::vector<int> subset(inside.begin(), inside.begin() + static_cast<std::ptrdiff_t>(n_in));
  subset.insert(subset.end(), outside.begin(), outside.begin() + static_cast<std::ptrdiff_t>(n_out));
  std::sort(subset.begin(), subset.end());
  auto spec = make_language(p.name, p.universe_seed, p.lang_seed, std::move(subset), p.proto_overlap, p.sigma);
  spec.min_len = p.min_len;
  spec.max_len = p.max_len;
  return spec;
}

Utterance gen_utterance(const LanguageSpec& spec, std::size_t index) {
  const std::size_t k = spec.graphemes.size();
  if (k == 0) throw ContractError("language '" + spec.name + "' has an empty grapheme subset");
  if (spec.min_len < 1 || spec.min_len > spec.max_len || spec.min_emit < 1 || spec.min_emit > spec.max_emit) {
    throw ConfigError("invalid length or emission range");
  }
  std::mt19937_64 rng(detail::mix_seed(spec.seed, 0x1000 + index));
  std::uniform_int_distribution<std::size_t> len_d(spec.min_len, spec.max_len);
  std::uniform_int_distribution<std::size_t> emit_d(spec.min_emit, spec.max_emit);
  std::uniform_int_distribution<std::size_t> first_d(0, k - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t len = len_d(rng);
  std::vector<std::size_t> seq{first_d(rng)};
  while (seq.size() < len) {
    const double r = u01(rng);
    double acc = 0;
    std::size_t next = k - 1;
    for (std::size_t j = 0; j < k; ++j) {
      acc += spec.transitions[seq.back() * k + j];
      if (r < acc) {
        next = j;
        break;
      }
    }
    if (next == seq.back()) next = (next + 1) % k;
    seq.push_back(next);
  }
  std::vector<float> frames;
  Utterance u;
  u.id = spec.name + "-" + std::to_string(index);
  for (auto gi : seq) {
    u.transcript.push_back(spec.graphemes[gi]);
    const std::size_t n = emit_d(rng);
    const auto& proto = spec.prototypes[gi];
    for (std::size_t f = 0; f < n; ++f)
      for (std::size_t j = 0; j < kFeatureDim; ++j) {
        double v = proto[j];
        if (spec.sigma > 0) v += spec.sigma * noise(rng);
        frames.push_back(static_cast<float>(v));
      }
  }
  const std::size_t t = frames.size() / kFeatureDim;
  u.features = Tensor<float>({t, kFeatureDim}, std::move(frames));
  return u;
}

Corpus gen_language(const LanguageSpec& spec, std::size_t n_utts, std::size_t first) {
  if (n_utts < 1) throw ContractError("gen_language: n_utts must be >= 1");
  Corpus c;
  c.reserve(n_utts);
  for (std::size_t i = 0; i < n_utts; ++i) c.push_back(gen_utterance(spec, first + i));
  return c;
}

std::size_t grapheme_coverage(const std::vector<const Corpus*>& corpora) {
  std::set<int> seen;
  for (const auto* c : corpora) {
    for (const auto& u : *c)
      for (int g : u.transcript)
        if (g != kBlank) seen.insert(g);
  }
  return seen.size();
}

namespace io {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

}  // namespace io

std::string serialize_corpus(const Corpus& c) {
  std::string out(io::kCorpusMagic, 4);
  io::put_le<std::uint32_t>(out, io::kCorpusVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.size()));
  for (const auto& u : c) {
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.id.size()));
    out += u.id;
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.features.rows()));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.features.cols()));
    for (float v : u.features.data()) io::put_f32(out, v);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.transcript.size()));
    for (int g : u.transcript) io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(g));
  }
  return out;
}

Corpus parse_corpus(const std::string& bytes) {
  io::Reader r(bytes, "corpus");
  if (r.get_bytes(4) != std::string(io::kCorpusMagic, 4)) throw FormatError("corpus: bad magic (expected CARC)");
  const auto version = r.get<std::uint32_t>();
  if (version != io::kCorpusVersion) {
    throw FormatError("corpus: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(io::kCorpusVersion) + ")");
  }
  const auto n = r.get<std::uint32_t>();
  Corpus c;
  for (std::uint32_t i = 0; i < n; ++i) {
    Utterance u;
    u.id = r.get_bytes(r.get<std::uint32_t>());
    const auto t = r.get<std::uint32_t>(), f = r.get<std::uint32_t>();
    if (t == 0 || f == 0) throw FormatError("corpus: utterance '" + u.id + "' has an empty feature matrix");
    std::vector<float> data(static_cast<std::size_t>(t) * f);
    for (auto& v : data) v = r.get_f32();
    u.features = Tensor<float>({t, f}, std::move(data));
    const auto len = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < len; ++k) u.transcript.push_back(r.get<std::uint16_t>());
    c.push_back(std::move(u));
  }
  if (!r.done()) throw FormatError("corpus: trailing bytes after the last utterance");
  return c;
}

}  // namespace car
