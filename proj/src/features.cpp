#include "malfuse/features.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "malfuse/corpus.hpp"

namespace malfuse {

std::string to_string(FeatureName f) {
  switch (f) {
    case FeatureName::pe_onehot: return "pe_onehot";
    case FeatureName::cg_embedding: return "cg_embedding";
    case FeatureName::cg_lowfreq: return "cg_lowfreq";
    case FeatureName::api_freq: return "api_freq";
    case FeatureName::pv_trace: return "pv_trace";
    case FeatureName::cooc_feat: return "cooc_feat";
    case FeatureName::stmt_embed: return "stmt_embed";
  }
  return "pe_onehot";
}

FeatureName feature_from_string(const std::string& s) {
  for (FeatureName f : kAllFeatures)
    if (to_string(f) == s) return f;
  throw ConfigError("unknown feature name '" + s + "'");
}

bool is_static(FeatureName f) {
  return f == FeatureName::pe_onehot || f == FeatureName::cg_embedding || f == FeatureName::cg_lowfreq;
}

void FeatureTable::append(const std::string& sample_id, const FeatureVector& v) {
  if (sample_ids.empty()) {
    name = v.name;
    values = Tensor::matrix(0, v.values.size());
  } else if (v.name != name) {
    throw Error("feature table " + to_string(name) + ": cannot append " + to_string(v.name));
  } else if (v.values.size() != length()) {
    throw ShapeError("feature table " + to_string(name) + ": row length " + std::to_string(v.values.size()) +
                     " differs from " + std::to_string(length()));
  }
  if (!all_finite(v.values)) throw Error("feature " + to_string(v.name) + " of " + sample_id + " is not finite");
  sample_ids.push_back(sample_id);
  values.data.insert(values.data.end(), v.values.begin(), v.values.end());
  values.shape[0] = sample_ids.size();
}

FeatureTable FeatureTable::subset(const std::vector<std::size_t>& rows) const {
  FeatureTable t;
  t.name = name;
  for (std::size_t r : rows) t.sample_ids.push_back(sample_ids.at(r));
  t.values = gather_rows(values, rows);
  return t;
}

void write_feature_table(std::ostream& out, const FeatureTable& table) {
  out << to_string(table.name) << ',' << table.length() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << table.sample_ids[i];
    for (double v : table.values.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

FeatureTable read_feature_table(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing feature table header");
  const auto comma = line.find(',');
  if (comma == std::string::npos) throw ParseError(1, "header must be '<feature_name>,<length>'");
  FeatureTable table;
  table.name = feature_from_string(line.substr(0, comma));
  const std::size_t length = std::stoul(line.substr(comma + 1));
  table.values = Tensor::matrix(0, length);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    FeatureVector v{table.name, {}};
    while (std::getline(ss, cell, ',')) {
      double x = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), x);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) throw ParseError(line_no, "bad value '" + cell + "'");
      v.values.push_back(x);
    }
    if (v.values.size() != length) throw ParseError(line_no, "expected " + std::to_string(length) + " values");
    const std::string id = line.substr(0, line.find(','));
    table.sample_ids.push_back(id);
    table.values.data.insert(table.values.data.end(), v.values.begin(), v.values.end());
    table.values.shape[0] = table.sample_ids.size();
  }
  return table;
}

void save_feature_table(const std::filesystem::path& path, const FeatureTable& table) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  write_feature_table(f, table);
}

FeatureTable load_feature_table(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  return read_feature_table(f);
}

}  // namespace malfuse
