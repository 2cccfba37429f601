#pragma once

#include "unilion/voxel.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace unilion {

using json = nlohmann::json;

json matrix_to_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const json& j, Index cols_if_empty = 0);
json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const json& j);

json grid_to_json(const VoxelGrid& grid);
VoxelGrid grid_from_json(const json& j);

// {"grid": {...}, "coords": [[b,x,y,z],...], "features": [[...],...]}
json sparse_set_to_json(const SparseFeatureSetd& set);
SparseFeatureSetd sparse_set_from_json(const json& j);

// Writes through a temporary file and renames, so readers never see a
// partially written file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace unilion
