#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vnmt/model.hpp"
#include "vnmt/tokens.hpp"

namespace vnmt {

/// Token strings for ids. Reserved ids are fixed: <pad>=0, <s>=1, </s>=2, <unk>=3.
class Vocabulary {
 public:
  Vocabulary();
  /// Reserved tokens followed by "t4", "t5", ... up to `size` entries.
  static Vocabulary synthetic(std::size_t size);

  /// Returns the existing id when `token` is already present.
  int add(const std::string& token);
  /// UNK for unknown tokens.
  int id(const std::string& token) const;
  /// Throws std::out_of_range for an id outside the vocabulary.
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

enum class Task { copy, reverse, mapped_bimodal };
/// Fixed transform order for mapped_bimodal modes: identity, +1 shift, reversal.
enum class Transform { identity, shift, reversal };

std::string to_string(Task task);
Task parse_task(const std::string& name);
std::string to_string(Transform t);

struct TaskSpec {
  Task task = Task::mapped_bimodal;
  std::size_t min_len = 3;  // content tokens, EOS excluded
  std::size_t max_len = 6;
  std::size_t vocab_size = 16;
  std::size_t modes = 2;
  std::vector<double> mode_probs{0.5, 0.5};
  /// Each distinct source is emitted this many times with independently drawn modes, so the
  /// per-source target distribution is observable in the corpus.
  std::size_t source_repeats = 1;

  void validate() const;
};

/// Applies `t` to content tokens (no EOS). The shift maps content id c to the next content id,
/// wrapping inside [kFirstContentId, vocab_size).
std::vector<int> apply_transform(Transform t, std::span<const int> content, std::size_t vocab_size);

struct CorpusMetadata {
  std::string generator = "unknown";
  std::uint64_t seed = 0;
  std::size_t modes = 1;
  bool distilled = false;

  bool operator==(const CorpusMetadata&) const = default;
};

struct Corpus {
  std::vector<SentencePair> pairs;
  CorpusMetadata meta;

  std::size_t size() const { return pairs.size(); }
  bool operator==(const Corpus&) const = default;
};

/// Pure function of (spec, n, seed).
Corpus generate_corpus(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

struct DistillResult {
  Corpus corpus;  // distilled pairs only, tagged distilled
  std::size_t skipped = 0;
};

/// Pairs each source with the teacher's beam output. Sources whose hypothesis hits `max_len`
/// without EOS are skipped and counted. Identical sources are decoded once.
DistillResult distill(const Model& teacher, const Corpus& corpus, std::size_t beam, std::size_t max_len,
                      std::size_t threads = 1);

/// Original pairs followed by extra pairs; metadata of `original` with distilled set when either is.
Corpus concatenate(const Corpus& original, const Corpus& extra);

class CorpusFormatError : public std::runtime_error {
 public:
  CorpusFormatError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

void write_corpus(std::ostream& out, const Corpus& corpus);
Corpus read_corpus(std::istream& in);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

/// Index of the first transform among the first `modes` that maps the pair's source to its
/// target, or -1 when none does.
int mode_of(const SentencePair& pair, std::size_t modes, std::size_t vocab_size);

/// Shannon entropy in nats.
double entropy(std::span<const double> probs);

/// Mean over distinct sources of the Miller-Madow corrected entropy of their empirical target
/// distribution, in nats. Sources seen once contribute zero.
double conditional_target_entropy(const Corpus& corpus);

}  // namespace vnmt
