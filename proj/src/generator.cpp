#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "malfuse/corpus.hpp"
#include "malfuse/rng.hpp"

namespace malfuse {
namespace {

constexpr std::size_t kBlocks = 4;
constexpr std::size_t kImportSignature = 20;
constexpr std::size_t kImportCommon = 30;
constexpr double kImportSignatureP = 0.8;
constexpr double kImportCommonP = 0.5;
constexpr double kImportBackgroundP = 0.01;
constexpr std::size_t kApiFavourites = 30;
constexpr std::size_t kApiCommon = 40;
constexpr double kFavouriteMass = 0.7;
constexpr std::size_t kSuccessors = 3;
constexpr double kSuccessorMass = 0.5;
constexpr std::size_t kParamSignature = 6;
constexpr double kParamSignatureMass = 0.6;
constexpr std::size_t kParamKindsPerApi = 4;

constexpr std::array<const char*, 26> kExtensions = {".dll", ".exe", ".sys", ".tmp", ".dat", ".ini", ".log", ".bat", ".ps1",
                                                     ".vbs", ".js",  ".txt", ".cfg", ".db",  ".jpg", ".png", ".doc", ".xls",
                                                     ".pdf", ".zip", ".rar", ".lnk", ".inf", ".scr", ".cpl", ".bin"};
constexpr std::array<const char*, 24> kSymbols = {
    "generic_read",   "generic_write",  "create_always", "open_existing", "file_share_read", "hkey_local_machine",
    "hkey_current_user", "key_all_access", "mem_commit",  "page_execute_readwrite", "process_all_access", "infinite",
    "sock_stream",    "af_inet",        "ipproto_tcp",   "delete_pending", "null",           "true",
    "false",          "sw_hide",        "mutex",         "event",          "pipe",           "token_query"};
constexpr std::array<const char*, 6> kDirs = {"C:\\Windows\\System32\\", "C:\\Users\\admin\\AppData\\Local\\Temp\\",
                                              "C:\\ProgramData\\", "C:/Program Files/Common/", "\\\\?\\C:\\Windows\\",
                                              "D:\\work\\"};

// Parameter kinds: extensions, then 3 x 10 number buckets (leading digit 1,2,5 at
// powers 0..9), then symbolic tokens. Each kind normalizes to one token.
constexpr std::size_t kNumberLeads = 3;
constexpr std::size_t kNumberPowers = 10;
constexpr std::size_t kParamKinds = kExtensions.size() + kNumberLeads * kNumberPowers + kSymbols.size();

std::string raw_param(std::size_t kind, Rng& rng) {
  if (kind < kExtensions.size()) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "f%05zu", rng.index(100000));
    return std::string(kDirs[rng.index(kDirs.size())]) + stem + kExtensions[kind];
  }
  kind -= kExtensions.size();
  if (kind < kNumberLeads * kNumberPowers) {
    static constexpr std::array<int, kNumberLeads> kLeads = {1, 2, 5};
    const std::size_t power = kind % kNumberPowers;
    std::string digits = std::to_string(kLeads[kind / kNumberPowers]);
    for (std::size_t i = 0; i < power; ++i) digits += static_cast<char>('0' + rng.index(10));
    if (power >= 4 && rng.bernoulli(0.3)) {
      std::ostringstream hex;
      hex << "0x" << std::hex << std::uppercase << std::stoull(digits);
      return hex.str();
    }
    return digits;
  }
  kind -= kNumberLeads * kNumberPowers;
  std::string s = kSymbols[kind];
  if (rng.bernoulli(0.5)) std::transform(s.begin(), s.end(), s.begin(), [](char c) { return static_cast<char>(std::toupper(c)); });
  return s;
}

std::vector<std::size_t> pick_distinct(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  rng.shuffle(all);
  all.resize(std::min(k, n));
  return all;
}

void normalize(std::vector<double>& w) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (total > 0.0)
    for (double& x : w) x /= total;
}

std::vector<double> lerp(const std::vector<double>& a, const std::vector<double>& b, double t) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
  return out;
}

struct GraphMotif {
  std::vector<double> block_share;  // kBlocks
  std::vector<double> block_edge;   // kBlocks x kBlocks edge probabilities
  double size_center = 0.5;         // position in [nodes_min, nodes_max]
};

struct Profile {
  std::vector<double> imports;            // inclusion probability per import name
  GraphMotif graph;
  std::vector<double> api_start;          // start distribution
  std::vector<std::vector<double>> api;   // transition rows
  std::vector<double> param_signature;    // family part of the parameter mixture
};

// Samples of one family carry its profile on both channels; a decoyed channel
// draws from an even mixture with a second family.
struct ChannelSource {
  const Profile* own;
  const Profile* decoy;  // nullptr when not decoyed
};

std::vector<double> mean_of(const std::vector<std::vector<double>>& rows) {
  std::vector<double> m(rows.front().size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += r[i] / static_cast<double>(rows.size());
  return m;
}

std::vector<Profile> make_profiles(const CorpusSpec& spec, Rng& rng) {
  const std::size_t F = spec.family_count;
  const bool static_differs = spec.signal == SignalChannel::static_only || spec.signal == SignalChannel::both;
  const bool names_differ = spec.signal == SignalChannel::dynamic_only || spec.signal == SignalChannel::both;
  const bool params_differ = spec.signal != SignalChannel::static_only;

  std::vector<Profile> raw(F);
  const std::size_t IV = spec.import_vocab, AV = spec.api_vocab;
  const auto common_imports = pick_distinct(IV, kImportCommon, rng);
  const auto common_apis = pick_distinct(AV, kApiCommon, rng);
  for (std::size_t f = 0; f < F; ++f) {
    Profile& p = raw[f];
    // Import profile.
    p.imports.assign(IV, kImportBackgroundP);
    for (std::size_t i : common_imports) p.imports[i] = kImportCommonP;
    for (std::size_t i : pick_distinct(IV, kImportSignature, rng)) p.imports[i] = kImportSignatureP;
    // Call-graph motif.
    p.graph.block_share.resize(kBlocks);
    for (double& s : p.graph.block_share) s = rng.uniform(0.2, 1.0);
    normalize(p.graph.block_share);
    p.graph.block_edge.resize(kBlocks * kBlocks);
    for (double& e : p.graph.block_edge) e = rng.bernoulli(0.35) ? rng.uniform(0.25, 0.6) : rng.uniform(0.0, 0.04);
    p.graph.size_center = rng.uniform(0.1, 0.9);
    // API Markov chain: favourites carry most of the stationary mass and each
    // state prefers a few favourite successors.
    const auto favourites = pick_distinct(AV, kApiFavourites, rng);
    std::vector<double> base(AV, 1e-4);
    for (std::size_t i : common_apis) base[i] += (1.0 - kFavouriteMass) / kApiCommon;
    for (std::size_t i : favourites) base[i] += kFavouriteMass / kApiFavourites;
    normalize(base);
    p.api_start = base;
    p.api.assign(AV, {});
    for (std::size_t s = 0; s < AV; ++s) {
      std::vector<double> row(AV);
      for (std::size_t j = 0; j < AV; ++j) row[j] = (1.0 - kSuccessorMass) * base[j];
      for (std::size_t k = 0; k < kSuccessors; ++k) row[favourites[rng.index(favourites.size())]] += kSuccessorMass / kSuccessors;
      p.api[s] = std::move(row);
    }
    // Parameter signature.
    p.param_signature.assign(kParamKinds, 0.0);
    for (std::size_t k : pick_distinct(kParamKinds, kParamSignature, rng)) p.param_signature[k] = 1.0 / kParamSignature;
  }

  // Channels that carry no signal share family 0's profile.
  for (std::size_t f = 1; f < F; ++f) {
    if (!static_differs) {
      raw[f].imports = raw[0].imports;
      raw[f].graph = raw[0].graph;
    }
    if (!names_differ) {
      raw[f].api_start = raw[0].api_start;
      raw[f].api = raw[0].api;
    }
    if (!params_differ) raw[f].param_signature = raw[0].param_signature;
  }

  // Overlap noise pulls every profile toward the cross-family mean.
  const double o = spec.overlap_noise;
  Profile mean;
  {
    std::vector<std::vector<double>> imports, shares, edges, starts, sigs;
    std::vector<double> centers;
    for (const Profile& p : raw) {
      imports.push_back(p.imports);
      shares.push_back(p.graph.block_share);
      edges.push_back(p.graph.block_edge);
      starts.push_back(p.api_start);
      sigs.push_back(p.param_signature);
      centers.push_back(p.graph.size_center);
    }
    mean.imports = mean_of(imports);
    mean.graph.block_share = mean_of(shares);
    mean.graph.block_edge = mean_of(edges);
    mean.graph.size_center = std::accumulate(centers.begin(), centers.end(), 0.0) / static_cast<double>(F);
    mean.api_start = mean_of(starts);
    mean.param_signature = mean_of(sigs);
    mean.api.resize(AV);
    for (std::size_t s = 0; s < AV; ++s) {
      std::vector<std::vector<double>> rows;
      for (const Profile& p : raw) rows.push_back(p.api[s]);
      mean.api[s] = mean_of(rows);
    }
  }
  std::vector<Profile> out(F);
  for (std::size_t f = 0; f < F; ++f) {
    const Profile& p = raw[f];
    Profile& q = out[f];
    q.imports = lerp(p.imports, mean.imports, o);
    q.graph.block_share = lerp(p.graph.block_share, mean.graph.block_share, o);
    q.graph.block_edge = lerp(p.graph.block_edge, mean.graph.block_edge, o);
    q.graph.size_center = (1.0 - o) * p.graph.size_center + o * mean.graph.size_center;
    q.api_start = lerp(p.api_start, mean.api_start, o);
    q.api.resize(AV);
    for (std::size_t s = 0; s < AV; ++s) q.api[s] = lerp(p.api[s], mean.api[s], o);
    q.param_signature = lerp(p.param_signature, mean.param_signature, o);
  }
  return out;
}

// Per-API base distribution over parameter kinds, shared by all families.
std::vector<std::vector<double>> make_param_bases(std::size_t api_vocab, Rng& rng) {
  std::vector<std::vector<double>> bases(api_vocab, std::vector<double>(kParamKinds, 0.0));
  for (auto& b : bases) {
    for (std::size_t k : pick_distinct(kParamKinds, kParamKindsPerApi, rng)) b[k] = rng.uniform(0.5, 1.5);
    normalize(b);
  }
  return bases;
}

std::size_t pick(const std::vector<double>& a, const std::vector<double>* b, Rng& rng) {
  if (b != nullptr && rng.bernoulli(0.5)) return rng.categorical(*b);
  return rng.categorical(a);
}

std::string api_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "api_%03zu", i);
  return buf;
}

std::string import_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "imp_%03zu", i);
  return buf;
}

PeImports gen_imports(const std::string& id, ChannelSource src, Rng& rng) {
  PeImports out;
  out.sample_id = id;
  for (std::size_t i = 0; i < src.own->imports.size(); ++i) {
    double p = src.own->imports[i];
    if (src.decoy) p = 0.5 * (p + src.decoy->imports[i]);
    if (rng.bernoulli(p)) out.imports.insert(import_name(i));
  }
  if (out.imports.empty()) out.imports.insert(import_name(rng.index(src.own->imports.size())));
  return out;
}

CallGraph gen_callgraph(const CorpusSpec& spec, ChannelSource src, Rng& rng) {
  GraphMotif m = src.own->graph;
  if (src.decoy) {
    m.block_share = lerp(m.block_share, src.decoy->graph.block_share, 0.5);
    m.block_edge = lerp(m.block_edge, src.decoy->graph.block_edge, 0.5);
    m.size_center = 0.5 * (m.size_center + src.decoy->graph.size_center);
  }
  const double span = static_cast<double>(spec.callgraph_nodes_max - spec.callgraph_nodes_min);
  const double jitter = rng.uniform(-0.1, 0.1);
  const double pos = std::clamp(m.size_center + jitter, 0.0, 1.0);
  const std::size_t n = std::min(spec.canonical_size, spec.callgraph_nodes_min + static_cast<std::size_t>(std::lround(pos * span)));
  std::vector<std::size_t> block(n);
  for (std::size_t v = 0; v < n; ++v) block[v] = rng.categorical(m.block_share);
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      if (u != v && rng.bernoulli(m.block_edge[block[u] * kBlocks + block[v]])) edges.emplace_back(u, v);
  return canonicalize_callgraph(n, edges, spec.canonical_size);
}

std::string gen_trace_text(const CorpusSpec& spec, const std::string& id, ChannelSource src,
                           const std::vector<std::vector<double>>& param_bases, Rng& rng) {
  const std::size_t length = spec.trace_length_min + rng.index(spec.trace_length_max - spec.trace_length_min + 1);
  const Profile* d = src.decoy;
  std::size_t state = pick(src.own->api_start, d ? &d->api_start : nullptr, rng);
  std::string text;
  for (std::size_t l = 0; l < length; ++l) {
    if (l > 0) state = pick(src.own->api[state], d ? &d->api[state] : nullptr, rng);
    nlohmann::ordered_json j;
    j["sample_id"] = id;
    j["api"] = api_name(state);
    nlohmann::json params = nlohmann::json::array();
    const std::size_t count = rng.index(spec.params_max + 1);
    for (std::size_t r = 0; r < count; ++r) {
      std::size_t kind;
      if (rng.bernoulli(kParamSignatureMass)) {
        kind = pick(src.own->param_signature, d ? &d->param_signature : nullptr, rng);
      } else {
        kind = rng.categorical(param_bases[state]);
      }
      params.push_back(raw_param(kind, rng));
    }
    j["params"] = std::move(params);
    text += j.dump();
    text += '\n';
  }
  return text;
}

std::vector<std::size_t> family_sizes(const CorpusSpec& spec, Rng& rng) {
  const std::size_t F = spec.family_count;
  std::vector<std::size_t> sizes(F);
  if (spec.family_sizes == FamilySizes::uniform) {
    std::fill(sizes.begin(), sizes.end(), spec.samples_per_family);
    return sizes;
  }
  // Published family-size histogram: bins of width 50 and their family counts.
  static constexpr std::array<std::size_t, 7> kBinFamilies = {49, 19, 7, 2, 1, 1, 1};
  const double total = 80.0;
  // Largest-remainder allocation of F families to bins.
  std::vector<std::size_t> per_bin(kBinFamilies.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t b = 0; b < kBinFamilies.size(); ++b) {
    const double exact = static_cast<double>(F) * static_cast<double>(kBinFamilies[b]) / total;
    per_bin[b] = static_cast<std::size_t>(std::floor(exact));
    assigned += per_bin[b];
    remainders.emplace_back(-(exact - std::floor(exact)), b);
  }
  std::sort(remainders.begin(), remainders.end());
  for (std::size_t i = 0; assigned < F; ++i, ++assigned) ++per_bin[remainders[i % remainders.size()].second];
  std::size_t f = 0;
  for (std::size_t b = 0; b < per_bin.size(); ++b) {
    for (std::size_t i = 0; i < per_bin[b]; ++i, ++f) {
      const std::size_t lo = b == 0 ? 10 : 50 * b + 1, hi = 50 * (b + 1);
      const double raw = static_cast<double>(lo + rng.index(hi - lo + 1)) * spec.size_scale;
      sizes[f] = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(raw)));
    }
  }
  rng.shuffle(sizes);
  return sizes;
}

}  // namespace

std::string to_string(SignalChannel c) {
  switch (c) {
    case SignalChannel::static_only: return "static_only";
    case SignalChannel::dynamic_only: return "dynamic_only";
    case SignalChannel::both: return "both";
    case SignalChannel::params_only: return "params_only";
  }
  return "both";
}

SignalChannel signal_channel_from_string(const std::string& s) {
  if (s == "static_only") return SignalChannel::static_only;
  if (s == "dynamic_only") return SignalChannel::dynamic_only;
  if (s == "both") return SignalChannel::both;
  if (s == "params_only") return SignalChannel::params_only;
  throw ConfigError("unknown signal channel '" + s + "'");
}

void CorpusSpec::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("corpus spec: ") + name + " must be positive");
  };
  positive(family_count, "family_count");
  positive(samples_per_family, "samples_per_family");
  positive(import_vocab, "import_vocab");
  positive(api_vocab, "api_vocab");
  positive(trace_length_min, "trace_length_min");
  positive(callgraph_nodes_min, "callgraph_nodes_min");
  positive(canonical_size, "canonical_size");
  if (family_count < 2) throw ConfigError("corpus spec: family_count must be at least 2");
  if (!(overlap_noise >= 0.0 && overlap_noise <= 1.0)) throw ConfigError("corpus spec: overlap_noise must lie in [0,1]");
  if (!(decoy_rate >= 0.0 && decoy_rate <= 1.0)) throw ConfigError("corpus spec: decoy_rate must lie in [0,1]");
  if (!(size_scale > 0.0)) throw ConfigError("corpus spec: size_scale must be positive");
  if (trace_length_max < trace_length_min) throw ConfigError("corpus spec: trace_length_max < trace_length_min");
  if (callgraph_nodes_max < callgraph_nodes_min) throw ConfigError("corpus spec: callgraph_nodes_max < callgraph_nodes_min");
  if (import_vocab < kImportCommon + kImportSignature) throw ConfigError("corpus spec: import_vocab too small");
  if (api_vocab < kApiCommon + kApiFavourites) throw ConfigError("corpus spec: api_vocab too small");
}

nlohmann::json CorpusSpec::to_json() const {
  return {{"family_count", family_count},
          {"samples_per_family", samples_per_family},
          {"family_sizes", family_sizes == FamilySizes::uniform ? "uniform" : "long_tail"},
          {"size_scale", size_scale},
          {"signal_channel", to_string(signal)},
          {"overlap_noise", overlap_noise},
          {"decoy_rate", decoy_rate},
          {"import_vocab", import_vocab},
          {"api_vocab", api_vocab},
          {"trace_length_min", trace_length_min},
          {"trace_length_max", trace_length_max},
          {"params_max", params_max},
          {"callgraph_nodes_min", callgraph_nodes_min},
          {"callgraph_nodes_max", callgraph_nodes_max},
          {"canonical_size", canonical_size},
          {"seed", seed}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
  CorpusSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "family_count") s.family_count = value.get<std::size_t>();
    else if (key == "samples_per_family") s.samples_per_family = value.get<std::size_t>();
    else if (key == "family_sizes") {
      const auto v = value.get<std::string>();
      if (v == "uniform") s.family_sizes = FamilySizes::uniform;
      else if (v == "long_tail") s.family_sizes = FamilySizes::long_tail;
      else throw ConfigError("corpus spec: unknown family_sizes '" + v + "'");
    } else if (key == "size_scale") s.size_scale = value.get<double>();
    else if (key == "signal_channel") s.signal = signal_channel_from_string(value.get<std::string>());
    else if (key == "overlap_noise") s.overlap_noise = value.get<double>();
    else if (key == "decoy_rate") s.decoy_rate = value.get<double>();
    else if (key == "import_vocab") s.import_vocab = value.get<std::size_t>();
    else if (key == "api_vocab") s.api_vocab = value.get<std::size_t>();
    else if (key == "trace_length_min") s.trace_length_min = value.get<std::size_t>();
    else if (key == "trace_length_max") s.trace_length_max = value.get<std::size_t>();
    else if (key == "params_max") s.params_max = value.get<std::size_t>();
    else if (key == "callgraph_nodes_min") s.callgraph_nodes_min = value.get<std::size_t>();
    else if (key == "callgraph_nodes_max") s.callgraph_nodes_max = value.get<std::size_t>();
    else if (key == "canonical_size") s.canonical_size = value.get<std::size_t>();
    else if (key == "seed") s.seed = value.get<std::uint64_t>();
    else throw ConfigError("corpus spec: unknown key '" + key + "'");
  }
  s.validate();
  return s;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng profile_rng(derive_seed(spec.seed, {0xfa11}));
  const std::vector<Profile> profiles = make_profiles(spec, profile_rng);
  const auto param_bases = make_param_bases(spec.api_vocab, profile_rng);
  Rng size_rng(derive_seed(spec.seed, {0x512e}));
  const std::vector<std::size_t> sizes = family_sizes(spec, size_rng);

  Corpus corpus;
  for (std::size_t f = 0; f < spec.family_count; ++f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "family_%02zu", f);
    corpus.family_names.emplace_back(buf);
  }
  const std::size_t F = spec.family_count;
  std::size_t serial = 0;
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t i = 0; i < sizes[f]; ++i, ++serial) {
      Rng rng(derive_seed(spec.seed, {0x5a3e, serial}));
      auto channel = [&]() {
        ChannelSource src{&profiles[f], nullptr};
        if (rng.bernoulli(spec.decoy_rate)) src.decoy = &profiles[(f + 1 + rng.index(F - 1)) % F];
        return src;
      };
      const ChannelSource static_src = channel();
      const ChannelSource dynamic_src = channel();
      Sample s;
      char id[32];
      std::snprintf(id, sizeof id, "sample_%05zu", serial);
      s.sample_id = id;
      s.family.value = static_cast<int>(f);
      s.imports = gen_imports(s.sample_id, static_src, rng);
      s.callgraph = gen_callgraph(spec, static_src, rng);
      s.trace = parse_trace_text(gen_trace_text(spec, s.sample_id, dynamic_src, param_bases, rng));
      corpus.samples.push_back(std::move(s));
    }
  }
  return corpus;
}

}  // namespace malfuse
