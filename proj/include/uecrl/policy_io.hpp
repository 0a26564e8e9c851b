#pragma once

// Text checkpoint for PolicyParams.
//
//   # uecrl policy checkpoint
//   kind = tabular
//   vocab_size = 4
//   featurizer_id = none
//   global_step = 12
//   p3:1.2 = <v0> <v1> <v2> <v3>     (tabular row: prompt 3, prefix (1, 2))
//   p3: = ...                         (empty prefix)
//   f17 = ...                         (linear weight row for feature 17)
//
// Rows are written in sorted key order with round-trip precision; linear rows
// that are entirely zero are omitted.

#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "uecrl/format.hpp"
#include "uecrl/policy.hpp"

namespace uecrl {

inline std::string context_key_string(const ContextKey& ctx) {
  std::string s = "p" + std::to_string(ctx.prompt_id) + ":";
  for (std::size_t i = 0; i < ctx.prefix.size(); ++i) {
    if (i) s += '.';
    s += std::to_string(ctx.prefix[i]);
  }
  return s;
}

inline ContextKey parse_context_key(const std::string& s) {
  if (s.size() < 3 || s[0] != 'p') throw InvalidArgument("bad context key '" + s + "'");
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw InvalidArgument("bad context key '" + s + "'");
  ContextKey ctx;
  try {
    ctx.prompt_id = static_cast<PromptId>(std::stoul(s.substr(1, colon - 1)));
    std::string rest = s.substr(colon + 1);
    std::stringstream ss(rest);
    std::string tok;
    while (std::getline(ss, tok, '.')) ctx.prefix.push_back(static_cast<Token>(std::stoul(tok)));
  } catch (const std::logic_error&) {
    throw InvalidArgument("bad context key '" + s + "'");
  }
  return ctx;
}

inline void save_policy(std::ostream& out, const PolicyParams& params, std::int64_t global_step) {
  out << "# uecrl policy checkpoint\n";
  out << "kind = " << to_string(params.kind()) << "\n";
  out << "vocab_size = " << params.vocab_size() << "\n";
  out << "featurizer_id = " << params.featurizer_id() << "\n";
  out << "global_step = " << global_step << "\n";
  auto write_row = [&](const std::string& key, const double* v) {
    out << key << " =";
    for (int a = 0; a < params.vocab_size(); ++a) out << ' ' << fmt_exact(v[a]);
    out << '\n';
  };
  if (params.kind() == PolicyKind::tabular) {
    std::map<ContextKey, const std::vector<double>*> sorted;
    for (const auto& [ctx, row] : params.table()) sorted.emplace(ctx, &row);
    for (const auto& [ctx, row] : sorted) write_row(context_key_string(ctx), row->data());
  } else {
    const auto& w = params.weights();
    const std::size_t V = static_cast<std::size_t>(params.vocab_size());
    for (std::size_t f = 0; f * V < w.size(); ++f) {
      bool zero = true;
      for (std::size_t a = 0; a < V; ++a) zero = zero && w[f * V + a] == 0.0;
      if (!zero) write_row("f" + std::to_string(f), &w[f * V]);
    }
  }
}

struct LoadedPolicy {
  PolicyParams params;
  std::int64_t global_step = 0;
};

inline LoadedPolicy load_policy(std::istream& in) {
  std::map<std::string, std::string> header;
  std::string line;
  std::optional<PolicyParams> params;
  std::int64_t step = 0;
  auto build = [&]() {
    for (const char* k : {"kind", "vocab_size", "featurizer_id", "global_step"}) {
      if (!header.count(k)) throw InvalidArgument(std::string("checkpoint missing header '") + k + "'");
    }
    const int vocab = std::stoi(header["vocab_size"]);
    step = std::stoll(header["global_step"]);
    if (header["kind"] == "tabular") {
      params = PolicyParams::tabular(vocab);
    } else if (header["kind"] == "linear") {
      params = PolicyParams::linear(vocab, header["featurizer_id"]);
    } else {
      throw InvalidArgument("checkpoint has unknown kind '" + header["kind"] + "'");
    }
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    const auto eq_empty = line.find(" =");
    if (eq == std::string::npos && eq_empty == std::string::npos) {
      throw InvalidArgument("malformed checkpoint line: " + line);
    }
    const std::string key = line.substr(0, eq != std::string::npos ? eq : eq_empty);
    const std::string value = eq != std::string::npos ? line.substr(eq + 3) : std::string();
    const bool is_row = !key.empty() && (key[0] == 'p' || key[0] == 'f') && key != "featurizer_id";
    if (!is_row) {
      header[key] = value;
      continue;
    }
    if (!params) build();
    std::vector<double> row;
    std::istringstream vs(value);
    std::string tok;
    while (vs >> tok) row.push_back(std::stod(tok));
    if (static_cast<int>(row.size()) != params->vocab_size()) {
      throw InvalidArgument("checkpoint row has wrong length: " + key);
    }
    if (key[0] == 'p') {
      params->set_row(parse_context_key(key), std::move(row));
    } else {
      const std::size_t f = std::stoul(key.substr(1));
      auto& w = params->mutable_weights();
      const std::size_t V = static_cast<std::size_t>(params->vocab_size());
      if ((f + 1) * V > w.size()) throw InvalidArgument("checkpoint feature index out of range: " + key);
      std::copy(row.begin(), row.end(), w.begin() + static_cast<std::ptrdiff_t>(f * V));
    }
  }
  if (!params) build();
  if (!params->all_finite()) throw CorruptState("checkpoint contains non-finite parameters");
  return {std::move(*params), step};
}

}  // namespace uecrl
