#include "perft/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "perft/errors.hpp"
#include "perft/rng.hpp"

namespace perft {

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= kVocabSize) {
      throw InputError("token id " + std::to_string(id) + " outside the byte vocabulary");
    }
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::string_view task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::modular_add: return "modular_add";
    case TaskKind::markov_text: return "markov_text";
  }
  return "copy";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "modular_add") return TaskKind::modular_add;
  if (name == "markov_text") return TaskKind::markov_text;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (kind == TaskKind::modular_add) {
    if (modulus < 2) throw ConfigError("task.modulus must be >= 2");
    return;
  }
  if (alphabet.empty()) throw ConfigError("task.alphabet must not be empty");
  if (kind == TaskKind::markov_text) {
    if (order < 1) throw ConfigError("task.order must be >= 1");
    double contexts = std::pow(static_cast<double>(alphabet.size()), static_cast<double>(order));
    if (contexts > 1e6) throw ConfigError("task.order too large: alphabet^order exceeds 1e6 contexts");
  }
  if (min_len < 1 || max_len < min_len) throw ConfigError("task length range must satisfy 1 <= min_len <= max_len");
}

namespace {

std::string random_string(Rng& rng, const std::string& alphabet, std::size_t len) {
  std::string s(len, ' ');
  for (auto& c : s) c = alphabet[rng.below(alphabet.size())];
  return s;
}

std::size_t random_length(Rng& rng, const TaskSpec& spec) {
  return spec.min_len + static_cast<std::size_t>(rng.below(spec.max_len - spec.min_len + 1));
}

// One row of cumulative transition probabilities per context of `order`
// characters, with log-normal weights fixed by the seed.
std::vector<std::vector<double>> markov_chain(const TaskSpec& spec) {
  Rng rng(spec.seed ^ 0x6d61726b6f76ULL);
  const std::size_t n = spec.alphabet.size();
  std::size_t contexts = 1;
  for (std::size_t i = 0; i < spec.order; ++i) contexts *= n;
  std::vector<std::vector<double>> cdf(contexts, std::vector<double>(n));
  for (auto& row : cdf) {
    double total = 0.0;
    for (auto& w : row) {
      w = std::exp(2.0 * rng.normal());
      total += w;
    }
    double acc = 0.0;
    for (auto& w : row) {
      acc += w / total;
      w = acc;
    }
    row.back() = 1.0;
  }
  return cdf;
}

}  // namespace

std::vector<Sample> generate(const TaskSpec& spec, std::size_t n) {
  if (n < 1) throw ConfigError("generate: sample count must be >= 1");
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Sample> out;
  out.reserve(n);
  switch (spec.kind) {
    case TaskKind::copy:
    case TaskKind::reverse:
      for (std::size_t i = 0; i < n; ++i) {
        std::string s = random_string(rng, spec.alphabet, random_length(rng, spec));
        std::string a = s;
        if (spec.kind == TaskKind::reverse) std::reverse(a.begin(), a.end());
        out.push_back({std::move(s), std::move(a)});
      }
      break;
    case TaskKind::modular_add:
      for (std::size_t i = 0; i < n; ++i) {
        const auto a = rng.below(spec.modulus);
        const auto b = rng.below(spec.modulus);
        out.push_back({std::to_string(a) + "+" + std::to_string(b) + " mod " +
                           std::to_string(spec.modulus) + "=",
                       std::to_string((a + b) % spec.modulus)});
      }
      break;
    case TaskKind::markov_text: {
      const auto cdf = markov_chain(spec);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = random_length(rng, spec);
        const std::size_t na = spec.alphabet.size();
        std::string text;
        // context = the last `order` symbols as a base-na number; starts uniform
        std::size_t context = rng.below(cdf.size());
        std::size_t place = cdf.size() / na;
        for (std::size_t c = context, k = 0; k < spec.order && text.size() < len; ++k, place /= na) {
          text.push_back(spec.alphabet[(c / place) % na]);
        }
        while (text.size() < len) {
          const double u = rng.uniform();
          const auto& row = cdf[context];
          std::size_t next = static_cast<std::size_t>(std::upper_bound(row.begin(), row.end(), u) - row.begin());
          next = std::min(next, row.size() - 1);
          text.push_back(spec.alphabet[next]);
          context = (context * na + next) % cdf.size();
        }
        out.push_back({"", std::move(text)});
      }
      break;
    }
  }
  return out;
}

std::vector<Sample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ": malformed JSON: " + e.what(), lineno);
    }
    if (!j.is_object() || !j.contains("instruction") || !j.contains("answer") ||
        !j["instruction"].is_string() || !j["answer"].is_string()) {
      throw ParseError(path.string() + ": expected string fields \"instruction\" and \"answer\"", lineno);
    }
    Sample s{j["instruction"].get<std::string>(), j["answer"].get<std::string>()};
    if (s.answer.empty()) throw ParseError(path.string() + ": empty answer", lineno);
    out.push_back(std::move(s));
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& s : samples) {
    out << nlohmann::json{{"instruction", s.instruction}, {"answer", s.answer}}.dump() << "\n";
  }
}

EncodedBatch encode_batch(std::span<const Sample> samples, const Tokenizer& tok) {
  if (samples.empty()) throw InputError("encode_batch: empty batch");
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> answer_start;
  EncodedBatch b;
  for (const auto& s : samples) {
    if (s.answer.empty()) throw InputError("encode_batch: sample with empty answer");
    std::vector<int> ids{Tokenizer::kBos};
    auto instr = tok.encode(s.instruction);
    ids.insert(ids.end(), instr.begin(), instr.end());
    ids.push_back(Tokenizer::kSep);
    answer_start.push_back(ids.size());
    auto ans = tok.encode(s.answer);
    ids.insert(ids.end(), ans.begin(), ans.end());
    ids.push_back(Tokenizer::kEos);
    b.lengths.push_back(ids.size() - 1);
    seqs.push_back(std::move(ids));
  }
  b.batch = samples.size();
  b.seq = *std::max_element(b.lengths.begin(), b.lengths.end());
  b.inputs.assign(b.batch * b.seq, Tokenizer::kPad);
  b.targets.assign(b.batch * b.seq, Tokenizer::kPad);
  b.loss_mask.assign(b.batch * b.seq, 0.0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const auto& ids = seqs[i];
    const std::size_t answer_end = ids.size() - 1;  // index of EOS
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      b.inputs[i * b.seq + t] = ids[t];
      b.targets[i * b.seq + t] = ids[t + 1];
      const std::size_t target_pos = t + 1;
      if (target_pos >= answer_start[i] && target_pos < answer_end) b.loss_mask[i * b.seq + t] = 1.0;
    }
  }
  return b;
}

}  // namespace perft
