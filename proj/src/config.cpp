#include "unilion/config.hpp"

#include "unilion/io.hpp"

#include <charconv>
#include <functional>
#include <sstream>

namespace unilion {

Availability Availability::parse(const std::string& s) {
  if (s == "L") return {true, false, false};
  if (s == "LT") return {true, false, true};
  if (s == "LC") return {true, true, false};
  if (s == "LCT") return {true, true, true};
  throw ConfigError("modalities: expected one of L, LT, LC, LCT, got '" + s + "'");
}

std::string Availability::name() const {
  std::string s;
  if (lidar) s += "L";
  if (camera) s += "C";
  if (temporal) s += "T";
  return s;
}

RunConfig::RunConfig() {
  grid.origin = {-4.8, -4.8, -1.0};
  grid.voxel_size = {0.3, 0.3, 0.25};
  grid.extent = {32, 32, 8};
  scene.grid = grid;
  scene.channels = channels;
}

BackboneConfig RunConfig::backbone() const {
  BackboneConfig cfg = BackboneConfig::uniform(blocks, channels, window_xy, window_z, group_sizes, op);
  cfg.ratio = ratio;
  return cfg;
}

void RunConfig::validate() const {
  if (!grid.valid()) throw ConfigError("grid: voxel size must be > 0 and extent >= 1");
  if (!modalities.lidar && !modalities.camera) throw ConfigError("modalities: need at least one sensor");
  if (topk < 1 || topk > 48) throw ConfigError("topk must lie in [1, 48]");
  if (map_classes < 2) throw ConfigError("map_classes must be >= 2");
  if (train_steps < 0) throw ConfigError("train.steps must be >= 0");
  if (!(train_lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  for (const auto& t : train_tasks)
    if (t != "det" && t != "map" && t != "occ" && t != "mot" && t != "plan")
      throw ConfigError("train.tasks: unknown task '" + t + "'");
  if (gradcheck_directions < 0) throw ConfigError("gradcheck.directions must be >= 0");
  if (!(gradcheck_eps > 0.0)) throw ConfigError("gradcheck.eps must be > 0");
  if (bench_channels < 1 || bench_repeats < 1 || bench_chunk < 1)
    throw ConfigError("bench: channels, repeats and chunk must be >= 1");
  for (Index t : bench_lengths)
    if (t < 1) throw ConfigError("bench.lengths must be >= 1");
  backbone().validate();
  scene.validate();
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  for (const auto& item : split(v, ',')) out.push_back(parse_number<T>(key, item));
  return out;
}

Eigen::Vector3d parse_vec3d(const std::string& key, const std::string& v) {
  const auto xs = parse_list<double>(key, v);
  if (xs.size() != 3) throw ConfigError(key + ": expected three values");
  return {xs[0], xs[1], xs[2]};
}

Eigen::Vector3i parse_vec3i(const std::string& key, const std::string& v) {
  const auto xs = parse_list<int>(key, v);
  if (xs.size() != 3) throw ConfigError(key + ": expected three values");
  return {xs[0], xs[1], xs[2]};
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"seed", [&](auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"grid.origin", [&](auto& k, auto& v) { c.grid.origin = parse_vec3d(k, v); }},
      {"grid.voxel_size", [&](auto& k, auto& v) { c.grid.voxel_size = parse_vec3d(k, v); }},
      {"grid.extent", [&](auto& k, auto& v) { c.grid.extent = parse_vec3i(k, v); }},
      {"channels", [&](auto& k, auto& v) { c.channels = parse_number<Index>(k, v); }},
      {"blocks", [&](auto& k, auto& v) { c.blocks = parse_number<Index>(k, v); }},
      {"window_xy", [&](auto& k, auto& v) { c.window_xy = parse_number<int>(k, v); }},
      {"window_z", [&](auto& k, auto& v) { c.window_z = parse_number<int>(k, v); }},
      {"group_sizes", [&](auto& k, auto& v) { c.group_sizes = parse_list<Index>(k, v); }},
      {"operator",
       [&](auto& k, auto& v) {
         if (v == "selective") c.op = ScanKind::Selective;
         else if (v == "wkv") c.op = ScanKind::WKV;
         else throw ConfigError(k + ": expected selective or wkv");
       }},
      {"ratio", [&](auto& k, auto& v) { c.ratio = parse_number<double>(k, v); }},
      {"topk", [&](auto& k, auto& v) { c.topk = parse_number<Index>(k, v); }},
      {"map_classes", [&](auto& k, auto& v) { c.map_classes = parse_number<Index>(k, v); }},
      {"modalities", [&](auto&, auto& v) { c.modalities = Availability::parse(v); }},
      {"precision",
       [&](auto& k, auto& v) {
         if (v == "double") c.precision = Precision::Double;
         else if (v == "float") c.precision = Precision::Float;
         else throw ConfigError(k + ": expected double or float");
       }},
      {"scene.frames", [&](auto& k, auto& v) { c.scene.frames = parse_number<int>(k, v); }},
      {"scene.boxes", [&](auto& k, auto& v) { c.scene.boxes = parse_number<int>(k, v); }},
      {"scene.points_per_box", [&](auto& k, auto& v) { c.scene.points_per_box = parse_number<int>(k, v); }},
      {"scene.ground_points", [&](auto& k, auto& v) { c.scene.ground_points = parse_number<int>(k, v); }},
      {"scene.dt", [&](auto& k, auto& v) { c.scene.dt = parse_number<double>(k, v); }},
      {"scene.ego_speed", [&](auto& k, auto& v) { c.scene.ego_speed = parse_number<double>(k, v); }},
      {"scene.ego_yaw_rate", [&](auto& k, auto& v) { c.scene.ego_yaw_rate = parse_number<double>(k, v); }},
      {"scene.max_box_speed", [&](auto& k, auto& v) { c.scene.max_box_speed = parse_number<double>(k, v); }},
      {"scene.cameras", [&](auto& k, auto& v) { c.scene.cameras = parse_number<int>(k, v); }},
      {"scene.raster",
       [&](auto& k, auto& v) {
         const auto xs = parse_list<int>(k, v);
         if (xs.size() != 2) throw ConfigError(k + ": expected height,width");
         c.scene.raster_height = xs[0];
         c.scene.raster_width = xs[1];
       }},
      {"scene.intensity_noise", [&](auto& k, auto& v) { c.scene.intensity_noise = parse_number<double>(k, v); }},
      {"train.steps", [&](auto& k, auto& v) { c.train_steps = parse_number<int>(k, v); }},
      {"train.lr", [&](auto& k, auto& v) { c.train_lr = parse_number<double>(k, v); }},
      {"train.tasks", [&](auto&, auto& v) { c.train_tasks = split(v, ','); }},
      {"gradcheck.directions", [&](auto& k, auto& v) { c.gradcheck_directions = parse_number<Index>(k, v); }},
      {"gradcheck.eps", [&](auto& k, auto& v) { c.gradcheck_eps = parse_number<double>(k, v); }},
      {"bench.lengths", [&](auto& k, auto& v) { c.bench_lengths = parse_list<Index>(k, v); }},
      {"bench.channels", [&](auto& k, auto& v) { c.bench_channels = parse_number<Index>(k, v); }},
      {"bench.repeats", [&](auto& k, auto& v) { c.bench_repeats = parse_number<int>(k, v); }},
      {"bench.chunk", [&](auto& k, auto& v) { c.bench_chunk = parse_number<Index>(k, v); }},
  };

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    const std::string val = trim(s.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second(key, val);
  }
  c.scene.grid = c.grid;
  c.scene.channels = c.channels;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config '" + path.string() + "': " + e.what());
  }
  return parse(text);
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "seed = " << seed << "\n"
     << "grid.origin = " << fmt(grid.origin.x()) << "," << fmt(grid.origin.y()) << "," << fmt(grid.origin.z()) << "\n"
     << "grid.voxel_size = " << fmt(grid.voxel_size.x()) << "," << fmt(grid.voxel_size.y()) << ","
     << fmt(grid.voxel_size.z()) << "\n"
     << "grid.extent = " << grid.extent.x() << "," << grid.extent.y() << "," << grid.extent.z() << "\n"
     << "channels = " << channels << "\n"
     << "blocks = " << blocks << "\n"
     << "window_xy = " << window_xy << "\n"
     << "window_z = " << window_z << "\n"
     << "group_sizes = " << join(group_sizes) << "\n"
     << "operator = " << (op == ScanKind::Selective ? "selective" : "wkv") << "\n"
     << "ratio = " << fmt(ratio) << "\n"
     << "topk = " << topk << "\n"
     << "map_classes = " << map_classes << "\n"
     << "modalities = " << modalities.name() << "\n"
     << "precision = " << (precision == Precision::Double ? "double" : "float") << "\n"
     << "scene.frames = " << scene.frames << "\n"
     << "scene.boxes = " << scene.boxes << "\n"
     << "scene.points_per_box = " << scene.points_per_box << "\n"
     << "scene.ground_points = " << scene.ground_points << "\n"
     << "scene.dt = " << fmt(scene.dt) << "\n"
     << "scene.ego_speed = " << fmt(scene.ego_speed) << "\n"
     << "scene.ego_yaw_rate = " << fmt(scene.ego_yaw_rate) << "\n"
     << "scene.max_box_speed = " << fmt(scene.max_box_speed) << "\n"
     << "scene.cameras = " << scene.cameras << "\n"
     << "scene.raster = " << scene.raster_height << "," << scene.raster_width << "\n"
     << "scene.intensity_noise = " << fmt(scene.intensity_noise) << "\n"
     << "train.steps = " << train_steps << "\n"
     << "train.lr = " << fmt(train_lr) << "\n"
     << "train.tasks = " << join(train_tasks) << "\n"
     << "gradcheck.directions = " << gradcheck_directions << "\n"
     << "gradcheck.eps = " << fmt(gradcheck_eps) << "\n"
     << "bench.lengths = " << join(bench_lengths) << "\n"
     << "bench.channels = " << bench_channels << "\n"
     << "bench.repeats = " << bench_repeats << "\n"
     << "bench.chunk = " << bench_chunk << "\n";
  return os.str();
}

}  // namespace unilion
