#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace perft {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by four specials.
class Tokenizer {
 public:
  static constexpr int kPad = 256;
  static constexpr int kBos = 257;
  static constexpr int kEos = 258;
  static constexpr int kSep = 259;
  static constexpr std::size_t kVocabSize = 260;

  std::vector<int> encode(std::string_view text) const;
  // Specials are dropped; throws InputError on ids outside the vocabulary.
  std::string decode(std::span<const int> ids) const;
  std::size_t vocab_size() const noexcept { return kVocabSize; }
};

struct Sample {
  std::string instruction;
  std::string answer;
};

enum class TaskKind { copy, reverse, modular_add, markov_text };

std::string_view task_kind_name(TaskKind k);
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  std::size_t min_len = 4;
  std::size_t max_len = 8;
  std::string alphabet = "abcdefghijklmnop";
  std::uint64_t modulus = 97;
  std::uint64_t seed = 0;
  std::size_t order = 1;  // markov_text: number of preceding characters the next one depends on

  void validate() const;
};

// Deterministic in (spec, n). markov_text samples have an empty instruction
// and the generated text as the answer, so the loss covers the whole text.
std::vector<Sample> generate(const TaskSpec& spec, std::size_t n);

// One JSON object per line with string fields "instruction" and "answer".
std::vector<Sample> load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples);

// Each sample becomes  BOS instruction SEP answer EOS;  inputs drop the last
// token and targets drop the first. The loss mask is 1 exactly on targets
// that are answer bytes; pads (right-aligned) carry mask 0.
struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> inputs;   // batch x seq
  std::vector<int> targets;  // batch x seq, pad where masked out beyond the sequence
  std::vector<double> loss_mask;
  std::vector<std::size_t> lengths;  // unpadded input lengths
};

EncodedBatch encode_batch(std::span<const Sample> samples, const Tokenizer& tok = {});

}  // namespace perft
