#pragma once

// Dyadic panel container, threshold grids and counterfactual treatment levels.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fedr/error.hpp"
#include "json.hpp"

namespace fedr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr std::size_t kMaxGridPoints = 512;

// Observed dyads (i, j, y_ij, x_ij). Senders and receivers live in separate
// index spaces even when their labels coincide. Immutable after construction.
class DyadPanel {
 public:
  DyadPanel() = default;

  // Dense 0-based ids. Labels default to "1".."I" / "1".."J".
  static DyadPanel from_indices(std::vector<int> sender, std::vector<int> receiver, VectorXd y, MatrixXd x,
                                std::vector<std::string> covariate_names = {},
                                std::vector<std::string> sender_labels = {},
                                std::vector<std::string> receiver_labels = {}) {
    DyadPanel p;
    const auto n = static_cast<Eigen::Index>(sender.size());
    if (receiver.size() != sender.size() || y.size() != n || x.rows() != n)
      throw ValidationError("dyad columns have mismatched lengths");
    p.sender_ = std::move(sender);
    p.receiver_ = std::move(receiver);
    p.y_ = std::move(y);
    p.x_ = std::move(x);
    int max_i = -1, max_j = -1;
    for (std::size_t d = 0; d < p.sender_.size(); ++d) {
      if (p.sender_[d] < 0 || p.receiver_[d] < 0) throw ValidationError("negative unit id");
      max_i = std::max(max_i, p.sender_[d]);
      max_j = std::max(max_j, p.receiver_[d]);
    }
    p.I_ = max_i + 1;
    p.J_ = max_j + 1;
    if (covariate_names.empty())
      for (Eigen::Index c = 0; c < p.x_.cols(); ++c) covariate_names.push_back("x" + std::to_string(c + 1));
    if (static_cast<Eigen::Index>(covariate_names.size()) != p.x_.cols())
      throw ValidationError("covariate name count does not match covariate columns");
    p.covariate_names_ = std::move(covariate_names);
    if (sender_labels.empty())
      for (int i = 0; i < p.I_; ++i) sender_labels.push_back(std::to_string(i + 1));
    if (receiver_labels.empty())
      for (int j = 0; j < p.J_; ++j) receiver_labels.push_back(std::to_string(j + 1));
    if (static_cast<int>(sender_labels.size()) != p.I_ || static_cast<int>(receiver_labels.size()) != p.J_)
      throw ValidationError("label tables do not match unit counts");
    p.sender_labels_ = std::move(sender_labels);
    p.receiver_labels_ = std::move(receiver_labels);
    p.index();
    return p;
  }

  // Relabels arbitrary string ids to dense ranges in order of first appearance.
  static DyadPanel from_labels(const std::vector<std::string>& sender, const std::vector<std::string>& receiver,
                               VectorXd y, MatrixXd x, std::vector<std::string> covariate_names) {
    std::vector<std::string> slab, rlab;
    std::unordered_map<std::string, int> smap, rmap;
    std::vector<int> si(sender.size()), ri(receiver.size());
    for (std::size_t d = 0; d < sender.size(); ++d) {
      auto [it, fresh] = smap.try_emplace(sender[d], static_cast<int>(slab.size()));
      if (fresh) slab.push_back(sender[d]);
      si[d] = it->second;
    }
    for (std::size_t d = 0; d < receiver.size(); ++d) {
      auto [it, fresh] = rmap.try_emplace(receiver[d], static_cast<int>(rlab.size()));
      if (fresh) rlab.push_back(receiver[d]);
      ri[d] = it->second;
    }
    return from_indices(std::move(si), std::move(ri), std::move(y), std::move(x), std::move(covariate_names),
                        std::move(slab), std::move(rlab));
  }

  int I() const noexcept { return I_; }
  int J() const noexcept { return J_; }
  int n() const noexcept { return static_cast<int>(sender_.size()); }
  int dx() const noexcept { return static_cast<int>(x_.cols()); }

  int sender(int d) const { return sender_[d]; }
  int receiver(int d) const { return receiver_[d]; }
  const std::vector<int>& senders() const noexcept { return sender_; }
  const std::vector<int>& receivers() const noexcept { return receiver_; }
  const VectorXd& y() const noexcept { return y_; }
  const MatrixXd& x() const noexcept { return x_; }
  const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }
  const std::vector<std::string>& sender_labels() const noexcept { return sender_labels_; }
  const std::vector<std::string>& receiver_labels() const noexcept { return receiver_labels_; }

  // Dyad indices in D_i and D_j.
  const std::vector<int>& dyads_of_sender(int i) const { return by_sender_[i]; }
  const std::vector<int>& dyads_of_receiver(int j) const { return by_receiver_[j]; }

  // Index of the reciprocal dyad (j, i), matched on labels, or -1 if absent.
  int partner(int d) const { return partner_[d]; }
  bool has_symmetric_pairs() const noexcept { return symmetric_pairs_ > 0; }

  int covariate_index(const std::string& name) const {
    for (std::size_t c = 0; c < covariate_names_.size(); ++c)
      if (covariate_names_[c] == name) return static_cast<int>(c);
    throw ConfigError("unknown covariate '" + name + "'");
  }

 private:
  void index() {
    const int n_obs = n();
    for (int d = 0; d < n_obs; ++d) {
      if (!std::isfinite(y_[d])) throw ValidationError("non-finite outcome at dyad " + std::to_string(d));
      for (int c = 0; c < dx(); ++c)
        if (!std::isfinite(x_(d, c)))
          throw ValidationError("non-finite covariate '" + covariate_names_[c] + "' at dyad " + std::to_string(d));
    }
    by_sender_.assign(I_, {});
    by_receiver_.assign(J_, {});
    std::map<std::pair<int, int>, int> cell;
    for (int d = 0; d < n_obs; ++d) {
      auto [it, fresh] = cell.emplace(std::make_pair(sender_[d], receiver_[d]), d);
      if (!fresh)
        throw ValidationError("duplicate pair (" + sender_labels_[sender_[d]] + ", " +
                              receiver_labels_[receiver_[d]] + ")");
      by_sender_[sender_[d]].push_back(d);
      by_receiver_[receiver_[d]].push_back(d);
    }
    std::string offenders;
    for (int i = 0; i < I_; ++i)
      if (by_sender_[i].size() < 2) offenders += " sender:" + sender_labels_[i];
    for (int j = 0; j < J_; ++j)
      if (by_receiver_[j].size() < 2) offenders += " receiver:" + receiver_labels_[j];
    if (!offenders.empty()) throw ValidationError("units with fewer than 2 observations:" + offenders);

    std::unordered_map<std::string, int> recv_of_label, send_of_label;
    for (int j = 0; j < J_; ++j) recv_of_label.emplace(receiver_labels_[j], j);
    for (int i = 0; i < I_; ++i) send_of_label.emplace(sender_labels_[i], i);
    partner_.assign(n_obs, -1);
    symmetric_pairs_ = 0;
    for (int d = 0; d < n_obs; ++d) {
      auto si = send_of_label.find(receiver_labels_[receiver_[d]]);
      auto rj = recv_of_label.find(sender_labels_[sender_[d]]);
      if (si == send_of_label.end() || rj == recv_of_label.end()) continue;
      auto it = cell.find({si->second, rj->second});
      if (it != cell.end() && it->second != d) {
        partner_[d] = it->second;
        ++symmetric_pairs_;
      }
    }
  }

  std::vector<int> sender_, receiver_;
  VectorXd y_;
  MatrixXd x_;
  int I_ = 0, J_ = 0;
  std::vector<std::string> covariate_names_, sender_labels_, receiver_labels_;
  std::vector<std::vector<int>> by_sender_, by_receiver_;
  std::vector<int> partner_;
  int symmetric_pairs_ = 0;
};

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvSchema {
  std::string sender = "sender";
  std::string receiver = "receiver";
  std::string outcome = "y";
  std::vector<std::string> covariates;

  static CsvSchema from_json(const nlohmann::json& j) {
    CsvSchema s;
    s.sender = j.value("sender", s.sender);
    s.receiver = j.value("receiver", s.receiver);
    s.outcome = j.value("outcome", s.outcome);
    if (j.contains("covariates")) s.covariates = j.at("covariates").get<std::vector<std::string>>();
    return s;
  }
  nlohmann::json to_json() const {
    return {{"sender", sender}, {"receiver", receiver}, {"outcome", outcome}, {"covariates", covariates}};
  }
};

namespace detail {

inline std::string trim_field(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    if (c == ',' && !quoted) {
      out.push_back(trim_field(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  out.push_back(trim_field(field));
  return out;
}

inline double parse_number(const std::string& s, long row, const std::string& column) {
  if (s.empty()) throw ParseError("empty value in column '" + column + "'", row);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ParseError("cannot parse '" + s + "' in column '" + column + "'", row);
  }
  if (used != s.size()) throw ParseError("trailing characters in '" + s + "' (column '" + column + "')", row);
  return v;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline DyadPanel load_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header row", 1);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError("column '" + name + "' not found in header", 1);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cs = column(schema.sender), cr = column(schema.receiver), cy = column(schema.outcome);
  std::vector<std::size_t> cx;
  for (const auto& c : schema.covariates) cx.push_back(column(c));

  std::vector<std::string> snd, rcv;
  std::vector<double> ys;
  std::vector<std::vector<double>> xs;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()), row);
    snd.push_back(f[cs]);
    rcv.push_back(f[cr]);
    ys.push_back(detail::parse_number(f[cy], row, schema.outcome));
    std::vector<double> xr;
    for (std::size_t k = 0; k < cx.size(); ++k) xr.push_back(detail::parse_number(f[cx[k]], row, schema.covariates[k]));
    xs.push_back(std::move(xr));
  }
  const auto n = static_cast<Eigen::Index>(ys.size());
  VectorXd y = Eigen::Map<VectorXd>(ys.data(), n);
  MatrixXd x(n, static_cast<Eigen::Index>(cx.size()));
  for (Eigen::Index d = 0; d < n; ++d)
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(d, c) = xs[d][c];
  return DyadPanel::from_labels(snd, rcv, std::move(y), std::move(x), schema.covariates);
}

inline DyadPanel load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  return load_csv(in, schema);
}

// Writes the panel with columns sender,receiver,y,<covariates>.
inline void write_csv(const DyadPanel& p, std::ostream& out) {
  out << "sender,receiver,y";
  for (const auto& c : p.covariate_names()) out << ',' << c;
  out << '\n';
  for (int d = 0; d < p.n(); ++d) {
    out << p.sender_labels()[p.sender(d)] << ',' << p.receiver_labels()[p.receiver(d)] << ','
        << detail::format_double(p.y()[d]);
    for (int c = 0; c < p.dx(); ++c) out << ',' << detail::format_double(p.x()(d, c));
    out << '\n';
  }
}

inline CsvSchema default_schema(const DyadPanel& p) {
  CsvSchema s;
  s.covariates = p.covariate_names();
  return s;
}

// ---------------------------------------------------------------------------
// Threshold grids

struct ThresholdGrid {
  std::vector<double> values;
  double lo = 0.0;
  double hi = 0.0;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t g) const { return values[g]; }
};

struct QuantileIndexed {
  std::vector<double> indices;
};
struct Equidistant {
  int count = 0;
};
struct Explicit {
  std::vector<double> values;
};
using GridMode = std::variant<QuantileIndexed, Equidistant, Explicit>;

// Smallest sample value whose empirical CDF reaches tau.
inline double empirical_quantile(std::vector<double> sorted_values, double tau) {
  if (sorted_values.empty()) throw ValidationError("empirical quantile of empty sample");
  std::sort(sorted_values.begin(), sorted_values.end());
  const double n = static_cast<double>(sorted_values.size());
  auto k = static_cast<std::size_t>(std::ceil(tau * n - 1e-12));
  if (k < 1) k = 1;
  if (k > sorted_values.size()) k = sorted_values.size();
  return sorted_values[k - 1];
}

// Evenly spaced steps 0..1 in `count` percent-style indices, e.g. (0.54, 0.95, 0.01).
inline std::vector<double> index_range(double first, double last, double step) {
  std::vector<double> out;
  const long m = std::lround((last - first) / step);
  for (long k = 0; k <= m; ++k) out.push_back(first + static_cast<double>(k) * step);
  return out;
}

inline ThresholdGrid build_grid(const DyadPanel& panel, const GridMode& mode, std::pair<double, double> region) {
  const auto [lo, hi] = region;
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) throw ConfigError("region bounds must be finite with lo <= hi");
  std::vector<double> vals;
  if (const auto* q = std::get_if<QuantileIndexed>(&mode)) {
    for (std::size_t k = 0; k < q->indices.size(); ++k) {
      const double t = q->indices[k];
      if (!(t > 0.0 && t < 1.0)) throw ConfigError("quantile indices must lie in (0,1)");
      if (k > 0 && !(t > q->indices[k - 1])) throw ConfigError("quantile indices must be strictly increasing");
    }
    std::vector<double> ys(panel.y().data(), panel.y().data() + panel.n());
    std::sort(ys.begin(), ys.end());
    for (double t : q->indices) vals.push_back(std::clamp(empirical_quantile(ys, t), lo, hi));
  } else if (const auto* e = std::get_if<Equidistant>(&mode)) {
    if (e->count < 1) throw ConfigError("equidistant grid needs at least one point");
    if (e->count == 1) {
      vals.push_back(lo);
    } else {
      for (int k = 0; k < e->count; ++k)
        vals.push_back(k + 1 == e->count ? hi : lo + (hi - lo) * static_cast<double>(k) / (e->count - 1));
    }
  } else {
    const auto& ex = std::get<Explicit>(mode).values;
    for (std::size_t k = 1; k < ex.size(); ++k)
      if (!(ex[k] > ex[k - 1])) throw ConfigError("explicit grid values must be strictly increasing");
    for (double v : ex) vals.push_back(std::clamp(v, lo, hi));
  }
  vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
  if (vals.empty()) throw ConfigError("threshold grid is empty");
  if (vals.size() > kMaxGridPoints) throw ConfigError("threshold grid exceeds 512 points");
  return ThresholdGrid{std::move(vals), lo, hi};
}

// ---------------------------------------------------------------------------
// Counterfactual treatment levels

enum class TreatmentKind { Binary, Shift, LogDouble };

struct TreatmentSpec {
  int column = 0;  // 0-based covariate column holding the treatment
  TreatmentKind kind = TreatmentKind::LogDouble;
  double shift = 1.0;

  void validate(const DyadPanel& p) const {
    if (column < 0 || column >= p.dx()) throw ConfigError("treatment column out of range");
    if (kind == TreatmentKind::Shift && (!std::isfinite(shift) || shift == 0.0))
      throw ConfigError("shift amount must be finite and nonzero");
  }
};

inline std::string to_string(TreatmentKind k) {
  switch (k) {
    case TreatmentKind::Binary: return "binary";
    case TreatmentKind::Shift: return "shift";
    case TreatmentKind::LogDouble: return "log_double";
  }
  return "?";
}

inline TreatmentKind treatment_kind_from_string(const std::string& s) {
  if (s == "binary") return TreatmentKind::Binary;
  if (s == "shift") return TreatmentKind::Shift;
  if (s == "log_double") return TreatmentKind::LogDouble;
  throw ConfigError("unknown treatment kind '" + s + "'");
}

// Covariate matrix with the treatment column set to level k in {0, 1}.
inline MatrixXd counterfactual_covariates(const DyadPanel& panel, const TreatmentSpec& spec, int k) {
  spec.validate(panel);
  if (k != 0 && k != 1) throw ConfigError("counterfactual level must be 0 or 1");
  MatrixXd x = panel.x();
  auto t = x.col(spec.column);
  switch (spec.kind) {
    case TreatmentKind::Binary:
      t.setConstant(k == 1 ? 1.0 : 0.0);
      break;
    case TreatmentKind::Shift:
      if (k == 1) t.array() += spec.shift;
      break;
    case TreatmentKind::LogDouble:
      if (k == 1) t.array() += std::log(2.0);
      break;
  }
  return x;
}

}  // namespace fedr
