#include "vbks/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

namespace vbks {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_number(std::string_view cell, double& out) {
  cell = trim(cell);
  if (cell.empty()) return false;
  if (cell.front() == '+') cell.remove_prefix(1);
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  return res.ec == std::errc() && res.ptr == cell.data() + cell.size();
}

std::vector<std::string_view> split_cells(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? comma : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd json_vec(const json& a) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  // Non-finite values are written as null (e.g. the state of an aborted run).
  for (std::size_t i = 0; i < a.size(); ++i) {
    v[static_cast<Eigen::Index>(i)] =
        a[i].is_null() ? std::numeric_limits<double>::quiet_NaN() : a[i].get<double>();
  }
  return v;
}

json mat_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

Eigen::MatrixXd json_mat(const json& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != static_cast<std::size_t>(m.cols())) throw IoError("ragged matrix in checkpoint");
    m.row(static_cast<Eigen::Index>(i)) = json_vec(rows[i]).transpose();
  }
  return m;
}

json gaussian_json(const GaussianVariational& q) {
  return {{"mode", q.is_full() ? "full" : "point"}, {"dim", q.dim()}, {"params", vec_json(q.params())}};
}

GaussianVariational json_gaussian(const json& j) {
  const auto n = j.at("dim").get<Eigen::Index>();
  const std::string mode = j.at("mode").get<std::string>();
  GaussianVariational q;
  if (mode == "full") {
    q = GaussianVariational::full(Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Identity(n, n));
  } else if (mode == "point") {
    q = GaussianVariational::point(Eigen::VectorXd::Zero(n));
  } else {
    throw IoError("unknown variational mode '" + mode + "'");
  }
  q.set_params(json_vec(j.at("params")));
  return q;
}

json moments_json(const AdamMoments& m) {
  return {{"first", vec_json(m.first)}, {"second", vec_json(m.second)}, {"updates", m.updates}};
}

AdamMoments json_moments(const json& j) {
  AdamMoments m;
  m.first = json_vec(j.at("first"));
  m.second = json_vec(j.at("second"));
  m.updates = j.at("updates").get<std::uint64_t>();
  return m;
}

json parse_checked(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat) {
    throw IoError(std::string("checkpoint is not in format ") + kCheckpointFormat);
  }
  return j;
}

double nullable(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

Dataset parse_csv(std::string_view text, bool normalize) {
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_cells(line);
    std::vector<double> row(cells.size());
    bool numeric = true;
    for (std::size_t c = 0; c < cells.size() && numeric; ++c) numeric = parse_number(cells[c], row[c]);
    if (!numeric) {
      if (rows.empty() && line_no == 1) continue;  // header
      std::ostringstream os;
      os << "line " << line_no << ": non-numeric or empty cell";
      throw IoError(os.str());
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      std::ostringstream os;
      os << "line " << line_no << ": expected " << rows.front().size() << " columns, found "
         << row.size();
      throw IoError(os.str());
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("no data rows");
  const auto cols = rows.front().size();
  if (cols < 2) throw IoError("need at least one input column and one output column");

  Dataset d;
  d.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols - 1));
  d.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c + 1 < cols; ++c) {
      d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
    d.y[static_cast<Eigen::Index>(i)] = rows[i].back();
  }
  if (!d.X.allFinite() || !d.y.allFinite()) throw IoError("data contains NaN or Inf");
  return normalize ? normalize_dataset(d) : d;
}

Dataset ingest_csv(const std::filesystem::path& path, bool normalize) {
  try {
    return parse_csv(read_text(path), normalize);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  std::ostringstream os;
  os.precision(17);
  for (Eigen::Index j = 0; j < data.dim(); ++j) os << "x" << j << ",";
  os << "y\n";
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    for (Eigen::Index j = 0; j < data.dim(); ++j) os << data.X(i, j) << ",";
    os << data.y[i] << "\n";
  }
  write_text(path, os.str());
}

Dataset normalize_dataset(const Dataset& data) {
  data.validate();
  Normalization n;
  const double rows = static_cast<double>(data.size());
  n.x_mean = data.X.colwise().mean();
  n.x_scale = ((data.X.rowwise() - n.x_mean).array().square().colwise().sum() / rows).sqrt();
  for (Eigen::Index j = 0; j < n.x_scale.size(); ++j) {
    if (!(n.x_scale[j] > 0.0)) n.x_scale[j] = 1.0;
  }
  n.y_mean = data.y.mean();
  n.y_scale = std::sqrt((data.y.array() - n.y_mean).square().sum() / rows);
  if (!(n.y_scale > 0.0)) n.y_scale = 1.0;
  return apply_normalization(data, n);
}

Dataset apply_normalization(const Dataset& data, const Normalization& norm) {
  if (norm.x_mean.size() != data.dim()) throw DataError("normalization dimension mismatch");
  Dataset out;
  out.X = ((data.X.rowwise() - norm.x_mean).array().rowwise() / norm.x_scale.array()).matrix();
  out.y = (data.y.array() - norm.y_mean) / norm.y_scale;
  out.normalization = norm;
  return out;
}

BatchMoments denormalize(const BatchMoments& m, const Normalization& norm) {
  BatchMoments out;
  out.mean = (m.mean.array() * norm.y_scale + norm.y_mean).matrix();
  out.variance = m.variance * (norm.y_scale * norm.y_scale);
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, Eigen::Index n_test,
                                          std::uint64_t seed) {
  data.validate();
  if (n_test < 1 || n_test >= data.size()) throw DataError("test split size must be in [1, |D|)");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::vector<Eigen::Index> test(order.begin(), order.begin() + n_test);
  const std::vector<Eigen::Index> train(order.begin() + n_test, order.end());
  std::pair<Dataset, Dataset> out;
  out.first.X = data.X(train, Eigen::all);
  out.first.y = data.y(train);
  out.second.X = data.X(test, Eigen::all);
  out.second.y = data.y(test);
  if (data.normalization) {
    out.first.normalization = data.normalization;
    out.second.normalization = data.normalization;
  }
  return out;
}

std::string state_to_json(const SgprState& s) {
  json j;
  j["format"] = kCheckpointFormat;
  j["kind"] = "kernel";
  j["kernel"] = s.kernel.name();
  j["inducing"] = mat_json(s.inducing.Z);
  j["q_u"] = gaussian_json(s.q_u);
  j["q_theta"] = gaussian_json(s.q_theta);
  j["adam"] = moments_json(s.moments);
  j["step"] = s.step;
  j["seed"] = s.seed;
  j["elbo_ema"] = s.elbo_ema;
  j["n_evals"] = s.n_evals;
  j["elbo_star"] = std::isfinite(s.elbo_star) ? json(s.elbo_star) : json(nullptr);
  j["rejected_in_row"] = s.rejected_in_row;
  return j.dump();
}

SgprState state_from_json(std::string_view text) {
  const json j = parse_checked(text);
  try {
    if (j.at("kind") != "kernel") throw IoError("checkpoint does not hold a kernel state");
    SgprState s;
    s.kernel = parse_kernel(j.at("kernel").get<std::string>());
    s.inducing.Z = json_mat(j.at("inducing"));
    s.q_u = json_gaussian(j.at("q_u"));
    s.q_theta = json_gaussian(j.at("q_theta"));
    if (s.q_theta.dim() != static_cast<Eigen::Index>(s.kernel.num_hyper()) ||
        s.q_u.dim() != s.inducing.size()) {
      throw IoError("checkpoint dimensions do not match its kernel and inducing set");
    }
    s.moments = json_moments(j.at("adam"));
    s.step = j.at("step").get<std::uint64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.elbo_ema = j.at("elbo_ema").get<double>();
    s.n_evals = j.at("n_evals").get<std::uint64_t>();
    s.elbo_star = nullable(j.at("elbo_star"));
    s.rejected_in_row = j.at("rejected_in_row").get<std::uint32_t>();
    return s;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed kernel checkpoint: ") + e.what());
  }
}

std::string belief_to_json(const KernelBeliefState& b) {
  json j;
  j["format"] = kCheckpointFormat;
  j["kind"] = "belief";
  j["kernels"] = b.kernel_names;
  j["q_g"] = gaussian_json(b.q_g);
  j["prior_mean"] = vec_json(b.prior_mean);
  j["prior_chol"] = mat_json(b.prior_chol);
  j["local_elbos"] = vec_json(b.local_elbos);
  j["posterior"] = vec_json(b.posterior);
  j["posterior_samples"] = b.posterior_samples;
  j["adam"] = moments_json(b.moments);
  j["step"] = b.step;
  j["seed"] = b.seed;
  return j.dump();
}

KernelBeliefState belief_from_json(std::string_view text) {
  const json j = parse_checked(text);
  try {
    if (j.at("kind") != "belief") throw IoError("checkpoint does not hold a belief state");
    KernelBeliefState b;
    b.kernel_names = j.at("kernels").get<std::vector<std::string>>();
    b.q_g = json_gaussian(j.at("q_g"));
    b.prior_mean = json_vec(j.at("prior_mean"));
    b.prior_chol = json_mat(j.at("prior_chol"));
    b.local_elbos = json_vec(j.at("local_elbos"));
    b.posterior = json_vec(j.at("posterior"));
    b.posterior_samples = j.at("posterior_samples").get<int>();
    b.moments = json_moments(j.at("adam"));
    b.step = j.at("step").get<std::uint64_t>();
    b.seed = j.at("seed").get<std::uint64_t>();
    return b;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed belief checkpoint: ") + e.what());
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace vbks
