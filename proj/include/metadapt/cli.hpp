#pragma once

// Command implementations behind the metadapt tool. Each returns a process
// exit code and reports failures on `err`; nothing is written to disk unless
// the whole command succeeds.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "metadapt/analysis.hpp"
#include "metadapt/checkpoint.hpp"
#include "metadapt/config.hpp"
#include "metadapt/environment.hpp"
#include "metadapt/error.hpp"
#include "metadapt/format.hpp"
#include "metadapt/rng.hpp"
#include "metadapt/train.hpp"

namespace metadapt::cli {

inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

struct CommonArgs {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key=value
};

inline Config resolve_config(const CommonArgs& a) {
  Config c = a.config_path ? load_config_file(*a.config_path) : Config{};
  for (const auto& o : a.overrides) apply_override(c, o);
  if (a.seed) c.seed = *a.seed;
  c.validate();
  return c;
}

// Writes all files or none: each goes to a temporary name first and the
// renames happen only after every write succeeded.
inline void write_files_atomically(const std::vector<std::pair<std::filesystem::path, std::string>>& files) {
  std::vector<std::filesystem::path> temps;
  try {
    for (const auto& [path, text] : files) {
      if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
      std::filesystem::path tmp = path;
      tmp += ".partial";
      temps.push_back(tmp);
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write '" + path.string() + "'");
      out << text;
      if (!out.flush()) throw Error("failed writing '" + path.string() + "'");
    }
  } catch (...) {
    std::error_code ec;
    for (const auto& t : temps) std::filesystem::remove(t, ec);
    throw;
  }
  for (std::size_t i = 0; i < files.size(); ++i) std::filesystem::rename(temps[i], files[i].first);
}

inline PolicyParams load_compatible(const std::string& path, const Config& c) {
  const Checkpoint ck = load_checkpoint(path);
  PolicyArchitecture expected = c.arch;
  if (ck.params.arch != expected) {
    throw CheckpointError("checkpoint '" + path + "' does not match the configured policy shape (hidden_sizes " +
                          config_detail::join_sizes(ck.params.arch.hidden_sizes) + " vs " +
                          config_detail::join_sizes(expected.hidden_sizes) + ")");
  }
  return ck.params;
}

template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

struct TrainArgs {
  CommonArgs common;
  std::string out_dir;
  std::size_t progress_every = 0;  // 0 disables progress lines
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Config c = resolve_config(a.common);
    const TrainConfig tc = c.train_config();
    const TrainResult r = meta_train(tc, RngStream(c.seed), [&](const TrainingLogRecord& rec) {
      if (a.progress_every && (rec.iteration + 1) % a.progress_every == 0) {
        err << "iter " << rec.iteration + 1 << "/" << tc.meta.iterations << " pre " << fmt_double(rec.pre_return)
            << " post " << fmt_double(rec.post_return) << '\n';
      }
    });
    std::ostringstream log;
    write_training_log(log, r.log, c.safe_enabled);
    const std::filesystem::path dir(a.out_dir);
    write_files_atomically({{dir / "final.ckpt", checkpoint_text(r.params, config_digest(c))},
                            {dir / "train.csv", log.str()},
                            {dir / "config.resolved", resolved_text(c)}});
    out << "wrote " << (dir / "final.ckpt").string() << '\n';
    return kOk;
  });
}

struct SweepArgs {
  CommonArgs common;
  std::string checkpoint;
  std::string out_csv;
};

inline SweepReport run_sweep(const PolicyParams& theta, const Config& c) {
  return task_sweep(theta, c.sweep_grid(), c.maml(), c.sweep.eval, RngStream(c.seed), c.training_range(), c.workers);
}

// The sweep CSV plus `<out_csv>.meta` holding the training range line.
inline int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Config c = resolve_config(a.common);
    const PolicyParams theta = load_compatible(a.checkpoint, c);
    const SweepReport rep = run_sweep(theta, c);
    std::ostringstream csv;
    std::ostringstream meta;
    write_sweep_csv(csv, rep);
    write_sweep_sidecar(meta, rep);
    write_files_atomically({{a.out_csv, csv.str()}, {a.out_csv + ".meta", meta.str()}});
    for (const auto& [lo, hi] : negative_region(rep))
      out << "negative_region " << fmt_double(lo) << ' ' << fmt_double(hi) << '\n';
    out << "wrote " << a.out_csv << '\n';
    return kOk;
  });
}

struct EvalArgs {
  CommonArgs common;
  std::string checkpoint;
  double task_param = 0.0;
};

// Shortest round-trip text, with ".0" added to integral values so every
// number reads as a real.
inline std::string real_text(double v) {
  std::string s = fmt_double(v);
  if (s.find_first_of(".eni") == std::string::npos) s += ".0";
  return s;
}

inline void write_report_kv(std::ostream& os, const AdaptationReport& r) {
  os << "task_family=" << to_string(r.task.family) << '\n';
  os << "task_param=" << real_text(r.task.parameter) << '\n';
  os << "n_eval=" << r.pre.n << '\n';
  const std::pair<const char*, const ReturnStats*> sides[] = {{"pre", &r.pre}, {"post", &r.post}};
  for (const auto& [name, st] : sides) {
    os << name << "_median=" << real_text(st->median) << '\n';
    os << name << "_p5=" << real_text(st->p5) << '\n';
    os << name << "_p25=" << real_text(st->p25) << '\n';
    os << name << "_p75=" << real_text(st->p75) << '\n';
    os << name << "_p95=" << real_text(st->p95) << '\n';
    os << name << "_mean=" << real_text(st->mean) << '\n';
  }
  os << "gamma_mean=" << real_text(r.gamma_mean) << '\n';
  os << "prob_improve=" << real_text(r.prob_improve) << '\n';
  os << "negative_flag=" << (r.negative_flag ? "true" : "false") << '\n';
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Config c = resolve_config(a.common);
    const TaskSpec task = TaskSpec{c.family, a.task_param}.validated();
    const PolicyParams theta = load_compatible(a.checkpoint, c);
    const AdaptationReport r =
        evaluate_adaptation(theta, task, c.maml(), c.sweep.eval, sweep_task_stream(RngStream(c.seed), task));
    write_report_kv(out, r);
    return kOk;
  });
}

struct CompareArgs {
  CommonArgs common;
  std::string checkpoint_a;
  std::string checkpoint_b;
  std::string out_csv;
};

inline int cmd_compare(const CompareArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Config c = resolve_config(a.common);
    const PolicyParams theta_a = load_compatible(a.checkpoint_a, c);
    const PolicyParams theta_b = load_compatible(a.checkpoint_b, c);
    const SweepReport ra = run_sweep(theta_a, c);
    const SweepReport rb = run_sweep(theta_b, c);
    std::ostringstream csv;
    write_compare_csv(csv, ra, rb);
    write_files_atomically({{a.out_csv, csv.str()}});
    out << "wrote " << a.out_csv << '\n';
    return kOk;
  });
}

}  // namespace metadapt::cli
