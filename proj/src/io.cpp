#include "unilion/io.hpp"

#include <fstream>
#include <sstream>

namespace unilion {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Index k = 0; k < m.cols(); ++k) r.push_back(m(i, k));
    rows.push_back(std::move(r));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, Index cols_if_empty) {
  if (!j.is_array()) throw ConfigError("matrix: expected array of rows");
  if (j.empty()) return Eigen::MatrixXd::Zero(0, cols_if_empty);
  const Index rows = static_cast<Index>(j.size());
  const Index cols = static_cast<Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const json& r = j.at(static_cast<std::size_t>(i));
    if (static_cast<Index>(r.size()) != cols) throw ConfigError("matrix: ragged rows");
    for (Index k = 0; k < cols; ++k) m(i, k) = r.at(static_cast<std::size_t>(k)).get<double>();
  }
  return m;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Index>(j.size()));
  for (Index i = 0; i < v.size(); ++i) v[i] = j.at(static_cast<std::size_t>(i)).get<double>();
  return v;
}

json grid_to_json(const VoxelGrid& grid) {
  return json{{"origin", {grid.origin.x(), grid.origin.y(), grid.origin.z()}},
              {"voxel_size", {grid.voxel_size.x(), grid.voxel_size.y(), grid.voxel_size.z()}},
              {"extent", {grid.extent.x(), grid.extent.y(), grid.extent.z()}}};
}

VoxelGrid grid_from_json(const json& j) {
  VoxelGrid g;
  for (int a = 0; a < 3; ++a) {
    g.origin[a] = j.at("origin").at(a).get<double>();
    g.voxel_size[a] = j.at("voxel_size").at(a).get<double>();
    g.extent[a] = j.at("extent").at(a).get<int>();
  }
  if (!g.valid()) throw ConfigError("grid: invalid voxel size or extent");
  return g;
}

json sparse_set_to_json(const SparseFeatureSetd& set) {
  json coords = json::array();
  for (const auto& c : set.coords) coords.push_back({c.batch, c.x, c.y, c.z});
  return json{{"grid", grid_to_json(set.grid)},
              {"coords", std::move(coords)},
              {"features", matrix_to_json(set.features)},
              {"channels", set.channels()}};
}

SparseFeatureSetd sparse_set_from_json(const json& j) {
  SparseFeatureSetd s;
  s.grid = grid_from_json(j.at("grid"));
  for (const auto& c : j.at("coords"))
    s.coords.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>(),
                        c.at(3).get<int>()});
  const Index channels = j.contains("channels") ? j.at("channels").get<Index>() : 0;
  s.features = matrix_from_json(j.at("features"), channels);
  require_dims(s.features.rows() == s.size(), "sparse set json: coords/features length mismatch");
  return s;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace unilion
