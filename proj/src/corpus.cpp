#include "malfuse/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

namespace malfuse {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool all_of_class(std::string_view s, int (*pred)(int)) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [pred](char c) { return pred(static_cast<unsigned char>(c)) != 0; });
}

std::string magnitude_tag(char leading, std::size_t power) {
  static constexpr const char* kGroups[] = {"", "k", "m", "g", "t", "p", "e", "z", "y"};
  const std::size_t group = std::min<std::size_t>(power / 3, std::size(kGroups) - 1);
  const std::size_t zeros = power - 3 * group;
  return std::string(1, leading) + std::string(zeros, '0') + kGroups[group];
}

// Returns the bucket tag for a numeric literal or an empty string.
std::string numeric_bucket(std::string_view s) {
  bool negative = false;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    negative = s.front() == '-';
    s.remove_prefix(1);
  }
  std::string tag;
  if (s.size() > 2 && s[0] == '0' && s[1] == 'x') {
    std::string_view hex = s.substr(2);
    if (!all_of_class(hex, std::isxdigit)) return {};
    while (hex.size() > 1 && hex.front() == '0') hex.remove_prefix(1);
    if (hex.size() > 16) hex = hex.substr(0, 16);  // saturate
    unsigned long long v = 0;
    std::from_chars(hex.data(), hex.data() + hex.size(), v, 16);
    const std::string dec = std::to_string(v);
    tag = v == 0 ? "0" : magnitude_tag(dec[0], dec.size() - 1);
  } else {
    std::string_view integer = s, fraction;
    if (auto dot = s.find('.'); dot != std::string_view::npos) {
      integer = s.substr(0, dot);
      fraction = s.substr(dot + 1);
      if (!fraction.empty() && !all_of_class(fraction, std::isdigit)) return {};
      if (integer.empty() && fraction.empty()) return {};
    }
    if (!integer.empty() && !all_of_class(integer, std::isdigit)) return {};
    if (integer.empty() && fraction.empty()) return {};
    while (!integer.empty() && integer.front() == '0') integer.remove_prefix(1);
    tag = integer.empty() ? "0" : magnitude_tag(integer[0], integer.size() - 1);
  }
  if (negative && tag != "0") tag.insert(tag.begin(), '-');
  return "num:" + tag;
}

std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream ss{std::string(line)};
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

std::size_t parse_node_id(const std::string& tok, std::size_t line) {
  if (!tok.empty() && tok[0] == '-') throw ParseError(line, "negative node id '" + tok + "'");
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) throw ParseError(line, "node id '" + tok + "' is not a non-negative integer");
  return v;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << content;
}

}  // namespace

std::string normalize_param_token(std::string_view raw) {
  std::string tok = lowercase(trim(raw));
  if (tok.find('\\') != std::string::npos || tok.find('/') != std::string::npos) {
    const std::size_t sep = tok.find_last_of("\\/");
    const std::string_view last = std::string_view(tok).substr(sep + 1);
    const std::size_t dot = last.find_last_of('.');
    if (dot == std::string_view::npos || dot + 1 == last.size()) return "path:";
    return "path:" + std::string(last.substr(dot));
  }
  if (std::string bucket = numeric_bucket(tok); !bucket.empty()) return bucket;
  return tok;
}

Tensor CallGraph::to_tensor() const {
  Tensor t = Tensor::matrix(size, size);
  for (std::size_t i = 0; i < adjacency.size(); ++i) t.data[i] = adjacency[i];
  return t;
}

// --- Vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> named) : names_(std::move(named)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!lookup_.emplace(names_[i], i).second) throw Error("vocabulary: duplicate name '" + names_[i] + "'");
  }
}

std::size_t Vocabulary::index(std::string_view name) const {
  auto it = lookup_.find(name);
  return it == lookup_.end() ? unknown_index() : it->second;
}

const std::string& Vocabulary::name(std::size_t i) const {
  static const std::string unknown(kUnknown);
  if (i == unknown_index()) return unknown;
  return names_.at(i);
}

nlohmann::json Vocabulary::to_json() const { return nlohmann::json{{"named", names_}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) { return Vocabulary(j.at("named").get<std::vector<std::string>>()); }

Vocabulary build_vocabulary(const std::map<std::string, std::size_t>& counts, std::size_t max_named) {
  if (max_named < 1) throw ConfigError("vocabulary needs max_named >= 1");
  if (counts.empty()) throw Error("cannot build a vocabulary from an empty multiset");
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> named;
  for (std::size_t i = 0; i < std::min(max_named, items.size()); ++i) named.push_back(items[i].first);
  return Vocabulary(std::move(named));
}

Vocabulary build_vocabulary(const std::vector<std::string>& names, std::size_t max_named) {
  std::map<std::string, std::size_t> counts;
  for (const std::string& n : names) ++counts[n];
  return build_vocabulary(counts, max_named);
}

// --- Corpus -----------------------------------------------------------------

std::vector<int> Corpus::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.family.value);
  return out;
}

Corpus Corpus::subset(const std::vector<std::size_t>& indices) const {
  Corpus c;
  c.family_names = family_names;
  c.samples.reserve(indices.size());
  for (std::size_t i : indices) c.samples.push_back(samples.at(i));
  return c;
}

// --- Trace files ------------------------------------------------------------

TraceFile parse_trace(std::istream& in, std::size_t param_cap) {
  TraceFile trace;
  bool have_id = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view body = trim(line);
    if (body.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed record: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "record is not an object");
    if (!j.contains("sample_id") || !j["sample_id"].is_string()) throw ParseError(line_no, "missing sample_id field");
    if (!j.contains("api") || !j["api"].is_string() || j["api"].get<std::string>().empty()) {
      throw ParseError(line_no, "missing api field");
    }
    const std::string id = j["sample_id"].get<std::string>();
    if (!have_id) {
      trace.sample_id = id;
      have_id = true;
    } else if (id != trace.sample_id) {
      throw ParseError(line_no, "sample_id '" + id + "' differs from '" + trace.sample_id + "'");
    }
    ApiStatement st;
    st.api = j["api"].get<std::string>();
    if (j.contains("params")) {
      if (!j["params"].is_array()) throw ParseError(line_no, "params is not a list");
      for (const auto& p : j["params"]) {
        if (!p.is_string()) throw ParseError(line_no, "params must be strings");
        if (st.params.size() < param_cap) st.params.push_back(normalize_param_token(p.get<std::string>()));
      }
    }
    trace.statements.push_back(std::move(st));
  }
  if (trace.statements.empty()) throw EmptyTraceError("trace stream contains no statements");
  return trace;
}

TraceFile parse_trace_text(std::string_view text, std::size_t param_cap) {
  std::istringstream ss{std::string(text)};
  return parse_trace(ss, param_cap);
}

std::string serialize_trace(const TraceFile& trace) {
  std::string out;
  for (const ApiStatement& st : trace.statements) {
    nlohmann::ordered_json j;
    j["sample_id"] = trace.sample_id;
    j["api"] = st.api;
    j["params"] = st.params;
    out += j.dump();
    out += '\n';
  }
  return out;
}

// --- Call graphs ------------------------------------------------------------

CallGraph canonicalize_callgraph(std::size_t node_count, const std::vector<std::pair<std::size_t, std::size_t>>& edges,
                                 std::size_t canonical_size) {
  std::vector<std::pair<std::size_t, std::size_t>> unique(edges);
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<std::size_t> out_degree(node_count, 0);
  for (const auto& [u, v] : unique) {
    if (u >= node_count || v >= node_count) throw Error("edge references node outside 0..n-1");
    ++out_degree[u];
  }
  std::vector<std::size_t> order(node_count);
  for (std::size_t i = 0; i < node_count; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out_degree[a] > out_degree[b]; });
  constexpr std::size_t kDropped = static_cast<std::size_t>(-1);
  std::vector<std::size_t> position(node_count, kDropped);
  for (std::size_t r = 0; r < std::min(node_count, canonical_size); ++r) position[order[r]] = r;

  CallGraph cg;
  cg.node_count = node_count;
  cg.size = canonical_size;
  cg.adjacency.assign(canonical_size * canonical_size, 0);
  for (const auto& [u, v] : unique) {
    if (position[u] == kDropped || position[v] == kDropped) continue;
    cg.adjacency[position[u] * canonical_size + position[v]] = 1;
  }
  return cg;
}

CallGraph parse_callgraph(std::istream& in, std::size_t canonical_size) {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  bool have_header = false;
  std::size_t declared = 0, max_id_plus_one = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto toks = split_ws(body);
    if (toks[0] == "n") {
      if (have_header || !edges.empty()) throw ParseError(line_no, "node-count header must come first");
      if (toks.size() != 2) throw ParseError(line_no, "expected 'n <node_count>'");
      declared = parse_node_id(toks[1], line_no);
      have_header = true;
      continue;
    }
    if (toks.size() != 2) throw ParseError(line_no, "expected an edge 'u v'");
    const std::size_t u = parse_node_id(toks[0], line_no);
    const std::size_t v = parse_node_id(toks[1], line_no);
    if (have_header && (u >= declared || v >= declared)) {
      throw ParseError(line_no, "node id out of range for n=" + std::to_string(declared));
    }
    max_id_plus_one = std::max({max_id_plus_one, u + 1, v + 1});
    edges.emplace_back(u, v);
  }
  return canonicalize_callgraph(have_header ? declared : max_id_plus_one, edges, canonical_size);
}

CallGraph parse_callgraph_text(std::string_view text, std::size_t canonical_size) {
  std::istringstream ss{std::string(text)};
  return parse_callgraph(ss, canonical_size);
}

std::string serialize_callgraph(const CallGraph& cg) {
  std::string out = "n " + std::to_string(std::min(cg.node_count, cg.size)) + "\n";
  for (std::size_t i = 0; i < cg.size; ++i)
    for (std::size_t j = 0; j < cg.size; ++j)
      if (cg.at(i, j)) out += std::to_string(i) + " " + std::to_string(j) + "\n";
  return out;
}

// --- PE imports -------------------------------------------------------------

PeImports parse_imports(std::istream& in, std::string sample_id) {
  PeImports p;
  p.sample_id = std::move(sample_id);
  std::string line;
  while (std::getline(in, line)) {
    const std::string_view body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    p.imports.emplace(body);
  }
  return p;
}

std::string serialize_imports(const PeImports& imports) {
  std::string out;
  for (const std::string& name : imports.imports) out += name + "\n";
  return out;
}

// --- Corpus on disk ---------------------------------------------------------

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "traces");
  fs::create_directories(dir / "callgraphs");
  fs::create_directories(dir / "imports");
  std::string manifest = "sample_id,family,trace_path,cg_path,imports_path\n";
  for (const Sample& s : corpus.samples) {
    const std::string trace_rel = "traces/" + s.sample_id + ".jsonl";
    const std::string cg_rel = "callgraphs/" + s.sample_id + ".edges";
    const std::string imp_rel = "imports/" + s.sample_id + ".txt";
    write_file(dir / trace_rel, serialize_trace(s.trace));
    write_file(dir / cg_rel, serialize_callgraph(s.callgraph));
    write_file(dir / imp_rel, serialize_imports(s.imports));
    manifest += s.sample_id + "," + corpus.family_names.at(static_cast<std::size_t>(s.family.value)) + "," + trace_rel +
                "," + cg_rel + "," + imp_rel + "\n";
  }
  write_file(dir / "manifest.csv", manifest);
}

Corpus load_corpus(const std::filesystem::path& dir, std::size_t canonical_size, std::size_t param_cap) {
  std::istringstream manifest(read_file(dir / "manifest.csv"));
  std::string line;
  std::size_t line_no = 0;
  struct Row {
    std::string id, family, trace, cg, imports;
  };
  std::vector<Row> rows;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.emplace_back(trim(col));
    if (line_no == 1 && !cols.empty() && cols[0] == "sample_id") continue;
    if (cols.size() != 5) throw ParseError(line_no, "manifest row needs 5 columns");
    rows.push_back({cols[0], cols[1], cols[2], cols[3], cols[4]});
  }
  Corpus corpus;
  std::set<std::string> families;
  for (const Row& r : rows) families.insert(r.family);
  corpus.family_names.assign(families.begin(), families.end());
  for (const Row& r : rows) {
    Sample s;
    s.sample_id = r.id;
    s.family.value = static_cast<int>(std::lower_bound(corpus.family_names.begin(), corpus.family_names.end(), r.family) -
                                      corpus.family_names.begin());
    try {
      std::istringstream t(read_file(dir / r.trace));
      s.trace = parse_trace(t, param_cap);
      std::istringstream g(read_file(dir / r.cg));
      s.callgraph = parse_callgraph(g, canonical_size);
    } catch (const ParseError& e) {
      throw Error("sample " + r.id + ": " + e.what());
    }
    std::istringstream i(read_file(dir / r.imports));
    s.imports = parse_imports(i, r.id);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace malfuse
