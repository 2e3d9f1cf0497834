// fedr: estimate, mc, verify, simulate.
//
// Exit codes: 0 ok, 2 configuration or input error, 3 estimation error,
// 4 verification failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fedr/fedr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitEstimation = 3;
constexpr int kExitVerify = 4;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fedr::ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw fedr::ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

// A manifest written by a previous run may be passed back as a config.
json config_payload(const json& j) { return j.contains("config") && j.at("config").is_object() ? j.at("config") : j; }

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------

struct EstimateArgs {
  std::string input, schema, treatment, grid, region, coefficients, tau, levels, cluster, variant, out, config;
  std::optional<int> draws, threads;
  std::optional<std::uint64_t> seed;
  bool no_shape = false, poisson = false;
};

void add_estimate(CLI::App& app, EstimateArgs& a) {
  auto* c = app.add_subcommand("estimate", "Distribution and quantile effects on a dyadic panel");
  c->add_option("--input", a.input, "Panel CSV");
  c->add_option("--schema", a.schema, "Columns sender,receiver,outcome[,covariates...]");
  c->add_option("--treatment", a.treatment, "covariate:kind[:shift], kind one of log_double|shift|binary");
  c->add_option("--grid", a.grid, "quantile:<list>, equidistant:<count> or explicit:<list>");
  c->add_option("--region", a.region, "lo,hi outcome region for the grid");
  c->add_option("--coefficients", a.coefficients, "Comma list of coefficients for joint bands");
  c->add_option("--tau", a.tau, "Quantile indices, a:b:step or a list");
  c->add_option("--levels", a.levels, "Confidence levels, comma list");
  c->add_option("--draws", a.draws, "Bootstrap draws");
  c->add_option("--seed", a.seed, "Bootstrap seed");
  c->add_option("--cluster", a.cluster, "none|pairwise");
  c->add_option("--variant", a.variant, "tilde|star");
  c->add_flag("--no-shape", a.no_shape, "Skip rearrangement and quantile inversion");
  c->add_flag("--poisson", a.poisson, "Add the Poisson baseline");
  c->add_option("--threads", a.threads, "Worker threads (0: FEDR_THREADS or hardware)");
  c->add_option("--out", a.out, "Output directory");
  c->add_option("--config", a.config, "JSON config or earlier manifest; its keys override flags");
}

fedr::RunConfig build_run_config(const EstimateArgs& a) {
  fedr::RunConfig c;
  if (!a.input.empty()) c.input = a.input;
  if (!a.schema.empty()) c.schema = fedr::parse_schema(a.schema);
  if (!a.treatment.empty()) c.treatment = fedr::TreatmentConfig::parse(a.treatment);
  if (!a.grid.empty()) c.grid = fedr::GridSpec::parse(a.grid);
  if (!a.region.empty()) {
    const auto r = fedr::parse_number_list(a.region, "region");
    if (r.size() != 2) throw fedr::ConfigError("region must be lo,hi");
    c.has_region = true;
    c.region_lo = r[0];
    c.region_hi = r[1];
  }
  if (!a.coefficients.empty()) c.coefficients = fedr::detail::split(a.coefficients, ',');
  if (!a.tau.empty()) c.taus = fedr::parse_number_list(a.tau, "tau");
  if (!a.levels.empty()) c.levels = fedr::parse_number_list(a.levels, "levels");
  if (a.draws) c.draws = *a.draws;
  if (a.seed) c.seed = *a.seed;
  if (!a.cluster.empty()) c.cluster = fedr::cluster_mode_from_string(a.cluster);
  if (!a.variant.empty()) c.variant = fedr::variant_from_string(a.variant);
  if (a.no_shape) c.shape_restrict = false;
  if (a.poisson) c.poisson = true;
  if (a.threads) c.threads = *a.threads;
  if (!a.out.empty()) c.out = a.out;
  if (!a.config.empty()) c.merge(config_payload(read_json_file(a.config)));
  if (c.treatment.covariate.empty()) throw fedr::ConfigError("a treatment is required (--treatment covariate:kind[:shift])");
  c.validate();
  return c;
}

int run_estimate(const EstimateArgs& a) {
  fedr::RunConfig cfg = build_run_config(a);
  cfg.schema = fedr::complete_schema(cfg.input, cfg.schema);
  const fedr::DyadPanel panel = fedr::load_csv(cfg.input, cfg.schema);
  const fedr::EstimateOptions opt = cfg.options(panel);
  const fedr::EstimationResult r = fedr::estimate(panel, opt);

  const fs::path dir(cfg.out);
  auto files = fedr::io::write_estimation(dir, panel, r, cfg.cluster);
  std::vector<std::string> messages = r.analysis.messages;
  messages.erase(std::remove(messages.begin(), messages.end(), std::string()), messages.end());
  for (const auto& lb : r.bands)
    if (lb.average.support_incomplete)
      messages.push_back("average effect at level " + fedr::io::level_tag(lb.level) +
                         ": grid does not span the outcome support");
  json manifest{{"tool", "fedr"},
                {"version", fedr::kVersion},
                {"command", "estimate"},
                {"config", cfg.to_json()},
                {"seed", cfg.seed},
                {"panel",
                 {{"dyads", panel.n()}, {"senders", panel.I()}, {"receivers", panel.J()}, {"covariates", panel.covariate_names()}}},
                {"grid", r.analysis.grid},
                {"degenerate_thresholds", r.analysis.degenerate},
                {"flagged_units", r.flagged_units},
                {"messages", messages}};
  files.push_back("manifest.json");
  manifest["files"] = files;
  fedr::io::write_text(dir / "manifest.json", dump(manifest));
  std::cerr << "fedr: " << r.analysis.grid.size() << " thresholds estimated";
  if (!r.analysis.degenerate.empty()) std::cerr << ", " << r.analysis.degenerate.size() << " degenerate skipped";
  std::cerr << "; results in " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct McArgs {
  std::string design, errors, out = "fedr_mc", config;
  std::optional<int> I, J, S, M, threads;
  std::optional<std::uint64_t> seed;
  int checkpoint_every = 25;
  bool fresh = false, quiet = false;
};

void add_mc(CLI::App& app, McArgs& a) {
  auto* c = app.add_subcommand("mc", "Monte Carlo study on the synthetic design");
  c->add_option("--design", a.design, "Design JSON");
  c->add_option("--config", a.config, "Same as --design; a manifest with a design key is accepted");
  c->add_option("--errors", a.errors, "independent|pairwise");
  c->add_option("--I", a.I, "Senders");
  c->add_option("--J", a.J, "Receivers");
  c->add_option("--S", a.S, "Replications");
  c->add_option("--M", a.M, "Bootstrap draws per replication");
  c->add_option("--seed", a.seed, "Study seed");
  c->add_option("--threads", a.threads, "Worker threads");
  c->add_option("--checkpoint-every", a.checkpoint_every, "Replications between checkpoints");
  c->add_option("--out", a.out, "Output directory");
  c->add_flag("--fresh", a.fresh, "Ignore an existing checkpoint");
  c->add_flag("--quiet", a.quiet, "No progress output");
}

int run_mc(const McArgs& a) {
  json dj = json::object();
  if (a.errors.size()) dj["errors"] = a.errors;
  if (a.I) dj["I"] = *a.I;
  if (a.J) dj["J"] = *a.J;
  if (a.S) dj["S"] = *a.S;
  if (a.M) dj["M"] = *a.M;
  if (a.seed) dj["seed"] = *a.seed;
  for (const auto* path : {&a.design, &a.config}) {
    if (path->empty()) continue;
    json f = read_json_file(*path);
    if (f.contains("design")) f = f.at("design");
    dj.update(f);
  }
  const fedr::McDesign design = fedr::McDesign::from_json(dj);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  const std::string ckpt = (dir / "checkpoint.json").string();
  if (a.fresh) fs::remove(ckpt);
  fedr::StudyOptions so;
  so.threads = fedr::resolve_threads(a.threads.value_or(0));
  so.checkpoint = ckpt;
  so.checkpoint_every = a.checkpoint_every;
  if (!a.quiet) so.progress = [](int done, int total) { std::cerr << "fedr mc: " << done << "/" << total << "\n"; };
  const fedr::StudyResult res = fedr::run_study(design, so);
  const auto& rep = *res.report;
  auto files = fedr::io::write_report(dir, rep);
  fedr::io::write_text(dir / "design.json", dump(design.to_json()));
  files.push_back("design.json");
  if (!a.quiet)
    std::cerr << "fedr mc: " << rep.completed << " completed, " << rep.failures << " failed; report in " << dir.string()
              << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string input, schema, grid, out;
  int size = 5;
  std::uint64_t seed = 1;
  double perturb_beta = 0.0;
  std::optional<int> clamp_sender;
};

void add_verify(CLI::App& app, VerifyArgs& a) {
  auto* c = app.add_subcommand("verify", "Check exact estimator identities");
  c->add_option("--input", a.input, "Panel CSV (default: a small synthetic panel)");
  c->add_option("--schema", a.schema, "Columns sender,receiver,outcome[,covariates...]");
  c->add_option("--grid", a.grid, "Quantile indices of the thresholds, a:b:step or a list");
  c->add_option("--size", a.size, "Senders and receivers of the synthetic panel");
  c->add_option("--seed", a.seed, "Seed of the synthetic panel");
  c->add_option("--perturb-beta", a.perturb_beta, "Add this to every coefficient after fitting (negative control)");
  c->add_option("--clamp-sender", a.clamp_sender, "Push one sender (0-based) above every threshold");
  c->add_option("--out", a.out, "Write the JSON report here as well");
}

fedr::DyadPanel verify_panel_input(const VerifyArgs& a) {
  if (!a.input.empty()) {
    fedr::CsvSchema schema = a.schema.empty() ? fedr::CsvSchema{} : fedr::parse_schema(a.schema);
    return fedr::load_csv(a.input, fedr::complete_schema(a.input, schema));
  }
  return fedr::verification_panel(a.size, a.size, a.seed);
}

int run_verify(const VerifyArgs& a) {
  fedr::DyadPanel panel = verify_panel_input(a);
  if (a.clamp_sender) panel = fedr::clamp_sender(panel, *a.clamp_sender);
  fedr::VerifyOptions o;
  if (!a.grid.empty()) o.grid_indices = fedr::parse_number_list(a.grid, "grid");
  o.beta_perturbation = a.perturb_beta;
  const fedr::VerifyReport rep = fedr::verify_panel(panel, o);
  json j = rep.to_json();
  j["panel"] = {{"dyads", panel.n()}, {"senders", panel.I()}, {"receivers", panel.J()}};
  const std::string text = dump(j);
  std::cout << text;
  if (!a.out.empty()) {
    const fs::path p(a.out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    fedr::io::write_text(p, text);
  }
  return rep.passed() ? 0 : kExitVerify;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string design, errors, out;
  std::optional<int> I, J;
  std::optional<std::uint64_t> seed;
  int replicate = 0;
};

void add_simulate(CLI::App& app, SimulateArgs& a) {
  auto* c = app.add_subcommand("simulate", "Write one synthetic panel as CSV");
  c->add_option("--design", a.design, "Design JSON");
  c->add_option("--errors", a.errors, "independent|pairwise");
  c->add_option("--I", a.I, "Senders");
  c->add_option("--J", a.J, "Receivers");
  c->add_option("--seed", a.seed, "Design seed");
  c->add_option("--replicate", a.replicate, "Replication index");
  c->add_option("--out", a.out, "CSV path (default stdout)");
}

int run_simulate(const SimulateArgs& a) {
  json dj = a.design.empty() ? json::object() : read_json_file(a.design);
  if (dj.contains("design")) dj = dj.at("design");
  if (!a.errors.empty()) dj["errors"] = a.errors;
  if (a.I) dj["I"] = *a.I;
  if (a.J) dj["J"] = *a.J;
  if (a.seed) dj["seed"] = *a.seed;
  const fedr::McDesign d = fedr::McDesign::from_json(dj);
  if (a.replicate < 0) throw fedr::ConfigError("replicate index must be nonnegative");
  const fedr::DyadPanel p = fedr::simulate_panel(fedr::prepare(d), a.replicate);
  if (a.out.empty()) {
    fedr::write_csv(p, std::cout);
  } else {
    fedr::io::write_with(a.out, [&](std::ostream& o) { fedr::write_csv(p, o); });
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedr: distribution and quantile effects for dyadic panels"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fedr::kVersion));
  EstimateArgs ea;
  McArgs ma;
  VerifyArgs va;
  SimulateArgs sa;
  add_estimate(app, ea);
  add_mc(app, ma);
  add_verify(app, va);
  add_simulate(app, sa);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  try {
    if (app.got_subcommand("estimate")) return run_estimate(ea);
    if (app.got_subcommand("mc")) return run_mc(ma);
    if (app.got_subcommand("verify")) return run_verify(va);
    if (app.got_subcommand("simulate")) return run_simulate(sa);
  } catch (const fedr::ConfigError& e) {
    std::cerr << "fedr: configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedr::ParseError& e) {
    std::cerr << "fedr: input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedr::ValidationError& e) {
    std::cerr << "fedr: input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedr::Error& e) {
    std::cerr << "fedr: estimation error: " << e.what() << "\n";
    return kExitEstimation;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "fedr: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
