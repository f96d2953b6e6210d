#include "vnmt/datasim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <thread>

#include "vnmt/rng.hpp"

namespace vnmt {

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
}

Vocabulary Vocabulary::synthetic(std::size_t size) {
  Vocabulary v;
  for (std::size_t i = v.size(); i < size; ++i) v.add("t" + std::to_string(i));
  return v;
}

int Vocabulary::add(const std::string& token) {
  if (const auto it = ids_.find(token); it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("Vocabulary: id " + std::to_string(id) + " outside [0, " +
                            std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string to_string(Task task) {
  switch (task) {
    case Task::copy: return "copy";
    case Task::reverse: return "reverse";
    case Task::mapped_bimodal: return "mapped_bimodal";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  if (name == "copy") return Task::copy;
  if (name == "reverse") return Task::reverse;
  if (name == "mapped_bimodal") return Task::mapped_bimodal;
  throw std::invalid_argument("unknown task '" + name + "' (expected copy, reverse or mapped_bimodal)");
}

std::string to_string(Transform t) {
  switch (t) {
    case Transform::identity: return "identity";
    case Transform::shift: return "shift";
    case Transform::reversal: return "reversal";
  }
  return "?";
}

void TaskSpec::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("TaskSpec: " + what); };
  if (min_len == 0 || min_len > max_len) fail("need 1 <= min_len <= max_len");
  if (vocab_size < static_cast<std::size_t>(kFirstContentId) + 2) fail("vocab_size leaves fewer than 2 content ids");
  if (modes == 0 || modes > 3) fail("modes must lie in [1, 3]");
  if (task != Task::mapped_bimodal && modes != 1) fail(to_string(task) + " is deterministic; modes must be 1");
  if (mode_probs.size() != modes) fail("mode_probs needs one entry per mode");
  double total = 0.0;
  for (double p : mode_probs) {
    if (!(p >= 0.0)) fail("mode_probs entries must be non-negative");
    total += p;
  }
  if (std::fabs(total - 1.0) > 1e-9) fail("mode_probs must sum to 1");
  if (source_repeats == 0) fail("source_repeats must be >= 1");
}

std::vector<int> apply_transform(Transform t, std::span<const int> content, std::size_t vocab_size) {
  std::vector<int> out(content.begin(), content.end());
  switch (t) {
    case Transform::identity: break;
    case Transform::reversal: std::reverse(out.begin(), out.end()); break;
    case Transform::shift: {
      const int span = static_cast<int>(vocab_size) - kFirstContentId;
      for (auto& c : out) c = kFirstContentId + (c - kFirstContentId + 1) % span;
      break;
    }
  }
  return out;
}

namespace {

std::size_t draw_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // u landed in the rounding gap of the cumulative sum; take the last positive entry.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return i;
  return 0;
}

}  // namespace

Corpus generate_corpus(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n == 0) throw std::invalid_argument("generate_corpus: n must be >= 1");
  Rng rng = Rng::stream(seed, "data");
  Corpus corpus;
  corpus.meta = {to_string(spec.task), seed, spec.modes, false};
  const auto content_span = spec.vocab_size - static_cast<std::size_t>(kFirstContentId);
  while (corpus.size() < n) {
    const auto len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    std::vector<int> content(len);
    for (auto& c : content) c = kFirstContentId + static_cast<int>(rng.below(content_span));
    std::vector<int> src = content;
    src.push_back(kEos);
    for (std::size_t r = 0; r < spec.source_repeats && corpus.size() < n; ++r) {
      Transform t = Transform::identity;
      if (spec.task == Task::reverse) t = Transform::reversal;
      if (spec.task == Task::mapped_bimodal) t = static_cast<Transform>(draw_index(spec.mode_probs, rng));
      auto tgt = apply_transform(t, content, spec.vocab_size);
      tgt.push_back(kEos);
      corpus.pairs.push_back({src, std::move(tgt)});
    }
  }
  return corpus;
}

DistillResult distill(const Model& teacher, const Corpus& corpus, std::size_t beam, std::size_t max_len,
                      std::size_t threads) {
  if (beam == 0) throw std::invalid_argument("distill: beam must be >= 1");
  std::map<std::vector<int>, std::size_t> slot;
  std::vector<const std::vector<int>*> sources;
  for (const auto& p : corpus.pairs) {
    if (slot.emplace(p.src, sources.size()).second) sources.push_back(&p.src);
  }
  std::vector<Hypothesis> hyps(sources.size());
  const auto worker = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < sources.size(); i += stride) hyps[i] = translate(teacher, *sources[i], beam, max_len);
  };
  threads = std::max<std::size_t>(1, std::min(threads, sources.size()));
  if (threads == 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t, threads);
    for (auto& th : pool) th.join();
  }
  DistillResult result;
  result.corpus.meta = corpus.meta;
  result.corpus.meta.distilled = true;
  for (const auto& p : corpus.pairs) {
    const auto& h = hyps[slot.at(p.src)];
    if (h.truncated) {
      ++result.skipped;
      continue;
    }
    result.corpus.pairs.push_back({p.src, h.tokens});
  }
  return result;
}

Corpus concatenate(const Corpus& original, const Corpus& extra) {
  Corpus out = original;
  out.meta.distilled = original.meta.distilled || extra.meta.distilled;
  out.pairs.insert(out.pairs.end(), extra.pairs.begin(), extra.pairs.end());
  return out;
}

CorpusFormatError::CorpusFormatError(std::size_t line, const std::string& what)
    : std::runtime_error("corpus line " + std::to_string(line) + ": " + what), line_(line) {}

namespace {

void write_ids(std::ostream& out, const std::vector<int>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out << ' ';
    out << ids[i];
  }
}

std::vector<int> parse_ids(std::string_view text, std::size_t line) {
  std::vector<int> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = std::min(text.find(' ', pos), text.size());
    const auto field = text.substr(pos, end - pos);
    int value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size() || value < 0) {
      throw CorpusFormatError(line, "token id '" + std::string(field) + "' is not a non-negative integer");
    }
    ids.push_back(value);
    pos = end + 1;
  }
  if (ids.empty()) throw CorpusFormatError(line, "empty sequence");
  if (ids.back() != kEos) throw CorpusFormatError(line, "sequence does not end with EOS");
  if (std::find(ids.begin(), ids.end(), kPad) != ids.end()) throw CorpusFormatError(line, "PAD inside a sequence");
  return ids;
}

}  // namespace

void write_corpus(std::ostream& out, const Corpus& corpus) {
  out << "# generator=" << corpus.meta.generator << '\n';
  out << "# seed=" << corpus.meta.seed << '\n';
  out << "# modes=" << corpus.meta.modes << '\n';
  out << "# distilled=" << (corpus.meta.distilled ? 1 : 0) << '\n';
  for (const auto& p : corpus.pairs) {
    write_ids(out, p.src);
    out << '\t';
    write_ids(out, p.tgt);
    out << '\n';
  }
}

Corpus read_corpus(std::istream& in) {
  Corpus corpus;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto body = line.substr(1 + (line.size() > 1 && line[1] == ' ' ? 1 : 0));
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw CorpusFormatError(number, "metadata line without '='");
      const auto key = body.substr(0, eq), value = body.substr(eq + 1);
      try {
        if (key == "generator") corpus.meta.generator = value;
        else if (key == "seed") corpus.meta.seed = std::stoull(value);
        else if (key == "modes") corpus.meta.modes = std::stoul(value);
        else if (key == "distilled") corpus.meta.distilled = value == "1";
        else throw CorpusFormatError(number, "unknown metadata key '" + key + "'");
      } catch (const std::logic_error&) {
        throw CorpusFormatError(number, "bad value for metadata key '" + key + "'");
      }
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw CorpusFormatError(number, "expected exactly one TAB between source and target");
    }
    const std::string_view view(line);
    corpus.pairs.push_back({parse_ids(view.substr(0, tab), number), parse_ids(view.substr(tab + 1), number)});
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  write_corpus(out, corpus);
  if (!out) throw std::runtime_error("failed writing corpus file " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file " + path.string());
  return read_corpus(in);
}

int mode_of(const SentencePair& pair, std::size_t modes, std::size_t vocab_size) {
  if (pair.src.empty() || pair.tgt.empty()) return -1;
  const std::span<const int> content(pair.src.data(), pair.src.size() - 1);
  for (std::size_t m = 0; m < modes; ++m) {
    auto expect = apply_transform(static_cast<Transform>(m), content, vocab_size);
    expect.push_back(kEos);
    if (expect == pair.tgt) return static_cast<int>(m);
  }
  return -1;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double conditional_target_entropy(const Corpus& corpus) {
  std::map<std::vector<int>, std::map<std::vector<int>, std::size_t>> counts;
  for (const auto& p : corpus.pairs) ++counts[p.src][p.tgt];
  if (counts.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [src, targets] : counts) {
    std::size_t n = 0;
    for (const auto& [tgt, c] : targets) n += c;
    std::vector<double> probs;
    for (const auto& [tgt, c] : targets) probs.push_back(static_cast<double>(c) / static_cast<double>(n));
    total += entropy(probs) + static_cast<double>(targets.size() - 1) / (2.0 * static_cast<double>(n));
  }
  return total / static_cast<double>(counts.size());
}

}  // namespace vnmt
