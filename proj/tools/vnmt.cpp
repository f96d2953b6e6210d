#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "vnmt/config.hpp"
#include "vnmt/datasim.hpp"
#include "vnmt/model.hpp"
#include "vnmt/sweep.hpp"
#include "vnmt/train.hpp"

namespace {

using namespace vnmt;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed_set) cfg.seed = c.seed;
  return cfg;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value run configuration file");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_set = true; }, "override the configured seed");
  cmd->add_option("--set", c.overrides, "override one config key (key=value); repeatable");
}

std::vector<std::vector<int>> read_id_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<int>> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line.front() == '#') continue;
    if (const auto tab = line.find('\t'); tab != std::string::npos) line = line.substr(tab + 1);
    std::istringstream ss(line);
    std::vector<int> ids;
    std::string tok;
    while (ss >> tok) {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw std::runtime_error(path.string() + " line " + std::to_string(number) + ": bad id '" + tok + "'");
      ids.push_back(v);
    }
    out.push_back(std::move(ids));
  }
  return out;
}

void write_ids(std::ostream& out, const std::vector<int>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? " " : "") << ids[i];
  out << '\n';
}

void check_ids(const std::vector<int>& ids, std::size_t vocab, std::size_t line) {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::runtime_error("input pair " + std::to_string(line) + ": token id " + std::to_string(id) +
                               " is outside the checkpoint's vocabulary of " + std::to_string(vocab));
    }
  }
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

int run(int argc, char** argv) {
  CLI::App app{"Latent-variable NMT with normalizing-flow posteriors on synthetic tasks"};
  app.require_subcommand(1);

  // gen-data
  Common gen;
  std::string gen_out, split = "train";
  std::size_t count = 0;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic corpus from the config's task");
  add_common(gen_cmd, gen);
  gen_cmd->add_option("--out", gen_out, "corpus file to write")->required();
  gen_cmd->add_option("--split", split, "train or dev")->check(CLI::IsMember({"train", "dev"}));
  gen_cmd->add_option("--count", count, "number of pairs (default: train_size or dev_size)");

  // train
  Common tr;
  std::string train_out, resume;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes metrics.csv and checkpoints");
  add_common(train_cmd, tr);
  train_cmd->add_option("--out", train_out, "output directory (overrides out_dir)");
  train_cmd->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  // translate
  std::string tr_ckpt, tr_input, tr_out, tr_scores;
  std::size_t tr_beam = 5, tr_max_len = 0;
  auto* translate_cmd = app.add_subcommand("translate", "beam-decode the sources of a corpus");
  translate_cmd->add_option("--checkpoint", tr_ckpt)->required()->check(CLI::ExistingFile);
  translate_cmd->add_option("--input", tr_input, "corpus file")->required()->check(CLI::ExistingFile);
  translate_cmd->add_option("--beam", tr_beam, "beam width")->check(CLI::PositiveNumber);
  translate_cmd->add_option("--out", tr_out, "hypotheses file, one id line per source")->required();
  translate_cmd->add_option("--scores", tr_scores, "optional CSV of per-sentence scores");
  translate_cmd->add_option("--max-len", tr_max_len, "decode length limit (default from the config)");

  // eval
  std::string ev_hyps, ev_refs, ev_out, ev_ckpt;
  std::size_t ev_beam = 5, ev_samples = 1;
  std::uint64_t ev_seed = 1;
  auto* eval_cmd = app.add_subcommand("eval", "score hypotheses, or a checkpoint, against references");
  auto* hyps_opt = eval_cmd->add_option("--hyps", ev_hyps, "hypothesis id lines")->check(CLI::ExistingFile);
  auto* ckpt_opt = eval_cmd->add_option("--checkpoint", ev_ckpt, "decode the references' sources and add held-out ELBO columns")
                       ->check(CLI::ExistingFile);
  hyps_opt->excludes(ckpt_opt);
  eval_cmd->add_option("--refs", ev_refs, "corpus file (id lines allowed with --hyps)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--beam", ev_beam, "beam width with --checkpoint")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--samples", ev_samples, "posterior draws per sentence for the ELBO")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ev_seed, "seed for the ELBO draws");
  eval_cmd->add_option("--out", ev_out, "metrics CSV (stdout when omitted)");

  // sweep
  Common sw;
  std::string sw_dim, sw_out, sw_grid;
  auto* sweep_cmd = app.add_subcommand("sweep", "train one run per grid point and tabulate");
  add_common(sweep_cmd, sw);
  sweep_cmd->add_option("--dimension", sw_dim, "dropout, latent_dim, flow_count or ortho_columns")->required();
  sweep_cmd->add_option("--grid", sw_grid, "comma-separated values (default: the appendix grid)");
  sweep_cmd->add_option("--out", sw_out, "output directory (overrides out_dir)");

  // distill
  std::string ds_ckpt, ds_input, ds_out;
  std::size_t ds_beam = 5, ds_threads = 1;
  bool ds_only = false;
  auto* distill_cmd = app.add_subcommand("distill", "relabel a corpus with a teacher's beam output");
  distill_cmd->add_option("--checkpoint", ds_ckpt, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  distill_cmd->add_option("--input", ds_input, "corpus file")->required()->check(CLI::ExistingFile);
  distill_cmd->add_option("--beam", ds_beam, "beam width")->check(CLI::PositiveNumber);
  distill_cmd->add_option("--out", ds_out, "corpus file: original + distilled pairs")->required();
  distill_cmd->add_flag("--distilled-only", ds_only, "write only the distilled pairs");
  distill_cmd->add_option("--threads", ds_threads, "decoding threads")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  if (gen_cmd->parsed()) {
    RunConfig cfg = resolve_config(gen);
    if (split == "train") {
      if (count) cfg.train_size = count;
      cfg.train_corpus.clear();
      save_corpus(training_corpus(cfg), gen_out);
    } else {
      if (count) cfg.dev_size = count;
      cfg.dev_corpus.clear();
      save_corpus(dev_corpus(cfg), gen_out);
    }
    return 0;
  }

  if (train_cmd->parsed()) {
    RunConfig cfg = resolve_config(tr);
    if (!train_out.empty()) cfg.out_dir = train_out;
    TrainOptions opts;
    if (!resume.empty()) opts.resume = resume;
    opts.on_eval = [](const MetricsRecord& r) {
      std::cerr << "step " << r.step << " loss " << r.loss << " kl " << r.kl_est << " gate " << r.mean_gate
                << " dev_overlap " << r.dev_overlap << '\n';
    };
    const auto result = train(cfg, opts);
    std::cerr << "done: " << result.steps << " steps, best dev overlap " << result.best_overlap << ", KL status "
              << to_string(collapse_monitor(result.records, cfg.schedule.anneal_steps)) << '\n';
    return 0;
  }

  if (translate_cmd->parsed()) {
    const auto state = load_checkpoint(tr_ckpt);
    const Model model = model_from_checkpoint(state);
    const Corpus input = load_corpus(tr_input);
    const auto max_len = tr_max_len ? tr_max_len : state.config.decode_limit();
    std::ofstream out(tr_out);
    if (!out) throw std::runtime_error("cannot write " + tr_out);
    std::ofstream scores;
    if (!tr_scores.empty()) {
      scores.open(tr_scores);
      scores << "line,log_prob,score,length,truncated\n";
      scores.precision(17);
    }
    for (std::size_t i = 0; i < input.size(); ++i) {
      check_ids(input.pairs[i].src, model.config().vocab_size, i + 1);
      const auto h = translate(model, input.pairs[i].src, tr_beam, max_len);
      write_ids(out, h.tokens);
      if (scores.is_open()) {
        scores << i + 1 << ',' << h.log_prob << ',' << h.score << ',' << h.tokens.size() << ','
               << (h.truncated ? 1 : 0) << '\n';
      }
    }
    return 0;
  }

  if (eval_cmd->parsed()) {
    std::ostringstream csv;
    csv.precision(17);
    if (ev_ckpt.empty()) {
      if (ev_hyps.empty()) throw std::invalid_argument("eval needs --hyps or --checkpoint");
      const auto m = evaluate_hypotheses(read_id_lines(ev_hyps), read_id_lines(ev_refs));
      csv << "token_accuracy,exact_match,overlap\n" << m.token_accuracy << ',' << m.exact_match << ',' << m.overlap << '\n';
    } else {
      const auto state = load_checkpoint(ev_ckpt);
      const Model model = model_from_checkpoint(state);
      const Corpus refs = load_corpus(ev_refs);
      for (std::size_t i = 0; i < refs.size(); ++i) {
        check_ids(refs.pairs[i].src, model.config().vocab_size, i + 1);
        check_ids(refs.pairs[i].tgt, model.config().vocab_size, i + 1);
      }
      const auto m = evaluate_model(model, refs, ev_beam, state.config.decode_limit());
      Rng rng = Rng::stream(ev_seed, "heldout");
      const auto elbo = heldout_elbo(model, refs.pairs, ev_samples, 0.0, rng);
      csv << "token_accuracy,exact_match,overlap,elbo_per_token,recon_per_token,kl_per_sentence,median_kl\n"
          << m.token_accuracy << ',' << m.exact_match << ',' << m.overlap << ',' << elbo.elbo_per_token << ','
          << elbo.recon_per_token << ',' << elbo.kl_per_sentence << ',' << median(elbo.sentence_kl) << '\n';
    }
    if (ev_out.empty()) {
      std::cout << csv.str();
    } else {
      std::ofstream(ev_out) << csv.str();
    }
    return 0;
  }

  if (sweep_cmd->parsed()) {
    RunConfig cfg = resolve_config(sw);
    if (!sw_out.empty()) cfg.out_dir = sw_out;
    const auto dim = parse_sweep_dimension(sw_dim);
    std::vector<std::string> grid;
    if (sw_grid.empty()) {
      grid = default_grid(dim);
    } else {
      std::stringstream ss(sw_grid);
      for (std::string v; std::getline(ss, v, ',');) grid.push_back(v);
    }
    const auto report = run_sweep(dim, grid, cfg, [](const SweepOutcome& o) {
      std::cerr << o.row << ' ' << o.column << ": "
                << (o.failed ? "failed (" + o.error + ")" : "overlap " + std::to_string(o.dev_overlap)) << '\n';
    });
    std::filesystem::create_directories(cfg.out_dir);
    const auto base = std::filesystem::path(cfg.out_dir) / ("sweep_" + to_string(dim));
    const auto table = format_sweep_table(report);
    std::ofstream(base.string() + ".txt") << table;
    std::ofstream(base.string() + ".csv") << sweep_csv(report);
    std::cout << table;
    return 0;
  }

  if (distill_cmd->parsed()) {
    const auto state = load_checkpoint(ds_ckpt);
    const Model teacher = model_from_checkpoint(state);
    const Corpus input = load_corpus(ds_input);
    for (std::size_t i = 0; i < input.size(); ++i) check_ids(input.pairs[i].src, teacher.config().vocab_size, i + 1);
    const auto result = distill(teacher, input, ds_beam, state.config.decode_limit(), ds_threads);
    save_corpus(ds_only ? result.corpus : concatenate(input, result.corpus), ds_out);
    std::cerr << "distilled " << result.corpus.size() << " pairs, skipped " << result.skipped << '\n';
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
