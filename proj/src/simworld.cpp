#include "gazeneck/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <variant>

#include "gazeneck/errors.hpp"

namespace gazeneck::sim {

using geometry::CameraIntrinsics;
using geometry::CameraPose;
using geometry::ViewStatus;

namespace {

using FieldRef = std::variant<double*, int*, Vec3*, std::uint64_t*, std::string*>;

std::vector<std::pair<std::string, FieldRef>> fields(WorldConfig& c) {
  return {
      {"desk_width", &c.desk_width},
      {"desk_depth", &c.desk_depth},
      {"desk_near_y", &c.desk_near_y},
      {"area_width", &c.area_width},
      {"area_depth", &c.area_depth},
      {"object_radius", &c.object_radius},
      {"plate_center", &c.plate_center},
      {"plate_radius", &c.plate_radius},
      {"plate_height", &c.plate_height},
      {"floor_z", &c.floor_z},
      {"width", &c.width},
      {"height", &c.height},
      {"hfov", &c.hfov},
      {"vfov", &c.vfov},
      {"baseline", &c.baseline},
      {"rig", &c.rig},
      {"initial_pitch", &c.initial_pitch},
      {"episode_steps", &c.episode_steps},
      {"control_rate", &c.control_rate},
      {"grasp_radius", &c.grasp_radius},
      {"lift_threshold", &c.lift_threshold},
      {"neck_speed", &c.neck_speed},
      {"arm_speed", &c.arm_speed},
      {"rot_speed", &c.rot_speed},
      {"grip_speed", &c.grip_speed},
      {"arm_home", &c.arm_home},
      {"gripper_marker_radius", &c.gripper_marker_radius},
      {"gripper_marker_height", &c.gripper_marker_height},
      {"grid_cols", &c.grid_cols},
      {"grid_rows", &c.grid_rows},
      {"home_exclusion_x", &c.home_exclusion_x},
      {"home_exclusion_y", &c.home_exclusion_y},
      {"clutter_seed", &c.clutter_seed},
      {"clutter_count", &c.clutter_count},
      {"gaze_sigma0", &c.gaze_sigma0},
      {"gaze_kappa", &c.gaze_kappa},
      {"gaze_e0", &c.gaze_e0},
      {"carry_gaze", &c.carry_gaze},
      {"demo_placement", &c.demo_placement},
      {"placement_jitter", &c.placement_jitter},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void WorldConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("config: ") + name + " must be positive");
  };
  positive(desk_width, "desk_width");
  positive(desk_depth, "desk_depth");
  positive(area_width, "area_width");
  positive(area_depth, "area_depth");
  positive(object_radius, "object_radius");
  positive(plate_radius, "plate_radius");
  positive(plate_height, "plate_height");
  positive(baseline, "baseline");
  positive(control_rate, "control_rate");
  positive(grasp_radius, "grasp_radius");
  positive(lift_threshold, "lift_threshold");
  positive(neck_speed, "neck_speed");
  positive(arm_speed, "arm_speed");
  positive(rot_speed, "rot_speed");
  positive(grip_speed, "grip_speed");
  positive(gaze_sigma0, "gaze_sigma0");
  positive(gripper_marker_radius, "gripper_marker_radius");
  if (area_width > desk_width / 2.0 + 1e-12 || area_depth > desk_depth + 1e-12)
    throw ConfigError("config: placement area must lie within the right half of the desk");
  if (width <= 0 || height <= 0 || width % 2 != 0 || height % 2 != 0)
    throw ConfigError("config: resolution must be positive and even");
  if (!(hfov > 0.0 && hfov < geometry::kPi) || !(vfov > 0.0 && vfov < geometry::kPi))
    throw ConfigError("config: field of view must lie in (0, pi)");
  if (episode_steps <= 0) throw ConfigError("config: episode_steps must be positive");
  if (grid_cols <= 0 || grid_rows <= 0) throw ConfigError("config: grid dimensions must be positive");
  if (clutter_count < 0) throw ConfigError("config: clutter_count must be non-negative");
  if (floor_z >= 0.0) throw ConfigError("config: floor must lie below the desk");
  if (gaze_kappa < 0.0 || !(gaze_e0 >= 0.0 && gaze_e0 < 1.0)) throw ConfigError("config: bad gaze noise parameters");
  if (carry_gaze != "plate" && carry_gaze != "object") throw ConfigError("config: carry_gaze must be plate or object");
  if (demo_placement != "grid" && demo_placement != "uniform")
    throw ConfigError("config: demo_placement must be grid or uniform");
  if (!(placement_jitter >= 0.0) || placement_jitter >= object_radius)
    throw ConfigError("config: placement_jitter must lie in [0, object_radius)");
  if (initial_pitch > geometry::kPitchMax || initial_pitch < geometry::kPitchMin)
    throw ConfigError("config: initial_pitch outside neck limits");
}

WorldConfig WorldConfig::parse(const std::string& text) {
  WorldConfig c;
  auto table = fields(c);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, double>) {
            *p = parse_double(key, value);
          } else if constexpr (std::is_same_v<T, int>) {
            const double d = parse_double(key, value);
            if (d != std::floor(d)) throw ConfigError("config: " + key + " must be an integer");
            *p = static_cast<int>(d);
          } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            try {
              *p = std::stoull(value);
            } catch (const std::exception&) {
              throw ConfigError("config: bad integer for " + key);
            }
          } else if constexpr (std::is_same_v<T, Vec3>) {
            std::istringstream vs(value);
            std::string part;
            std::vector<double> parts;
            while (std::getline(vs, part, ',')) parts.push_back(parse_double(key, trim(part)));
            if (parts.size() != 3) throw ConfigError("config: " + key + " needs three comma-separated values");
            *p = Vec3(parts[0], parts[1], parts[2]);
          } else {
            *p = value;
          }
        },
        it->second);
  }
  c.validate();
  return c;
}

WorldConfig WorldConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string WorldConfig::serialize() const {
  WorldConfig copy = *this;
  std::ostringstream os;
  for (const auto& [key, ref] : fields(copy)) {
    os << key << " = ";
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, double>) {
            os << format_double(*p);
          } else if constexpr (std::is_same_v<T, Vec3>) {
            os << format_double(p->x()) << ", " << format_double(p->y()) << ", " << format_double(p->z());
          } else {
            os << *p;
          }
        },
        ref);
    os << "\n";
  }
  return os.str();
}

std::uint64_t WorldConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : serialize()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::array<double, 10> ArmState::flat() const {
  const auto o = orientation.flat();
  return {position.x(), position.y(), position.z(), o[0], o[1], o[2], o[3], o[4], o[5], gripper};
}

ArmState ArmState::from_flat(const double* v) {
  ArmState a;
  a.position = Vec3(v[0], v[1], v[2]);
  a.orientation = Rot6::from_flat(v + 3);
  a.gripper = v[9];
  return a;
}

Rot6 home_orientation() { return Rot6{Vec3(1, 0, 0), Vec3(0, -1, 0)}; }

std::vector<ClutterBox> make_clutter(const WorldConfig& cfg) {
  // Boxes on the floor well to either side of the robot, at azimuths the
  // camera only reaches with a large neck yaw.
  std::mt19937_64 rng(cfg.clutter_seed);
  std::uniform_real_distribution<double> az(1.75, 2.2), dist(0.95, 1.5), half(0.06, 0.14), tall(0.10, 0.30);
  static const Color kColors[] = {{230, 200, 40}, {40, 190, 200}, {190, 60, 190}, {240, 140, 30},
                                  {120, 80, 200}, {250, 250, 250}, {30, 30, 30},  {150, 110, 60}};
  std::uniform_int_distribution<int> pick(0, static_cast<int>(std::size(kColors)) - 1);
  std::vector<ClutterBox> out;
  for (int i = 0; i < cfg.clutter_count; ++i) {
    const double side = (i % 2 == 0) ? 1.0 : -1.0;
    const double a = az(rng), d = dist(rng);
    ClutterBox b;
    b.half = Vec3(half(rng), half(rng), tall(rng));
    b.center = Vec3(cfg.rig.x() + side * d * std::sin(a), cfg.rig.y() + d * std::cos(a), cfg.floor_z + b.half.z());
    b.color = kColors[pick(rng)];
    out.push_back(b);
  }
  return out;
}

Command hold_command(const SceneState& s) { return Command{NeckPose{0.0, 0.0}, s.arm}; }

CameraIntrinsics intrinsics(const WorldConfig& cfg) {
  return geometry::make_intrinsics(cfg.width, cfg.height, cfg.hfov, cfg.vfov);
}

CameraPose rig_pose(const SceneState& s) { return geometry::neck_to_camera_pose(s.neck, s.cfg().rig); }

std::array<CameraPose, 2> eye_poses(const WorldConfig& cfg, const NeckPose& neck) {
  const CameraPose rig = geometry::neck_to_camera_pose(neck, cfg.rig);
  return {geometry::eye_pose(rig, -cfg.baseline / 2.0), geometry::eye_pose(rig, cfg.baseline / 2.0)};
}

ViewStatus stereo_view_status(const WorldConfig& cfg, const NeckPose& neck, const Vec3& center, double radius) {
  const auto k = intrinsics(cfg);
  const auto eyes = eye_poses(cfg, neck);
  const ViewStatus l = geometry::sphere_view_status(k, eyes[0], center, radius);
  const ViewStatus r = geometry::sphere_view_status(k, eyes[1], center, radius);
  if (l == ViewStatus::InView && r == ViewStatus::InView) return ViewStatus::InView;
  if (l == ViewStatus::Outside && r == ViewStatus::Outside) return ViewStatus::Outside;
  return ViewStatus::Partial;
}

std::vector<GridCell> grid_lattice(const WorldConfig& cfg) {
  const double r = cfg.object_radius;
  auto lin = [](double a, double b, int n, int i) { return n == 1 ? (a + b) / 2.0 : a + (b - a) * i / (n - 1); };
  std::vector<GridCell> cells;
  const NeckPose start{0.0, cfg.initial_pitch};
  for (int row = 0; row < cfg.grid_rows; ++row) {
    for (int col = 0; col < cfg.grid_cols; ++col) {
      GridCell c;
      c.col = col;
      c.row = row;
      c.id = row * cfg.grid_cols + col;
      c.position = Vec3(lin(r, cfg.area_width - r, cfg.grid_cols, col),
                        lin(cfg.desk_near_y + r, cfg.desk_near_y + cfg.area_depth - r, cfg.grid_rows, row), r);
      c.excluded = std::abs(c.position.x() - cfg.arm_home.x()) <= cfg.home_exclusion_x &&
                   std::abs(c.position.y() - cfg.arm_home.y()) <= cfg.home_exclusion_y;
      c.label = stereo_view_status(cfg, start, c.position, r);
      cells.push_back(c);
    }
  }
  return cells;
}

std::vector<GridCell> grid_positions(const WorldConfig& cfg) {
  std::vector<GridCell> out;
  for (const auto& c : grid_lattice(cfg))
    if (!c.excluded) out.push_back(c);
  if (out.size() != 44)
    throw ConfigInfeasible("grid lattice yields " + std::to_string(out.size()) + " cells, expected 44");
  return out;
}

SceneState new_scene(const WorldConfig& cfg, const Vec3& object_xy, std::uint64_t seed) {
  cfg.validate();
  const double x = object_xy.x(), y = object_xy.y();
  if (!(x >= 0.0 && x <= cfg.area_width && y >= cfg.desk_near_y && y <= cfg.desk_near_y + cfg.area_depth))
    throw OutOfArea("object position (" + std::to_string(x) + ", " + std::to_string(y) +
                    ") outside the placement area");
  SceneState s;
  s.config = std::make_shared<const WorldConfig>(cfg);
  s.clutter = std::make_shared<const std::vector<ClutterBox>>(make_clutter(cfg));
  s.object = Vec3(x, y, cfg.object_radius);
  s.neck = NeckPose{0.0, cfg.initial_pitch};
  s.arm = ArmState{cfg.arm_home, home_orientation(), 1.0};
  s.plate = cfg.plate_center;
  s.plate.z() = 0.0;
  s.seed = seed;
  return s;
}

SceneState new_scene(const WorldConfig& cfg, const GridCell& cell, std::uint64_t seed) {
  return new_scene(cfg, cell.position, seed);
}

double rest_height(const WorldConfig& cfg, const Vec3& plate, double x, double y) {
  const double r = cfg.object_radius;
  if (std::hypot(x - plate.x(), y - plate.y()) <= cfg.plate_radius) return cfg.plate_height + r;
  const bool on_desk = std::abs(x) <= cfg.desk_width / 2.0 && y >= cfg.desk_near_y &&
                       y <= cfg.desk_near_y + cfg.desk_depth;
  return on_desk ? r : cfg.floor_z + r;
}

namespace {

Rot6 step_orientation(const Rot6& cur, const Rot6& target, double max_angle) {
  if (cur == target) return cur;
  geometry::RotationMatrix rt;
  try {
    rt = geometry::rot6_decode(target);
  } catch (const DegenerateInput&) {
    return cur;  // unusable target: hold
  }
  const geometry::RotationMatrix rc = geometry::rot6_decode(cur);
  const Eigen::Quaterniond qc(rc), qt(rt);
  const double angle = qc.angularDistance(qt);
  if (angle <= max_angle) return geometry::rot6_encode(rt);
  return geometry::rot6_encode(qc.slerp(max_angle / angle, qt).toRotationMatrix());
}

double move_scalar(double cur, double target, double max_step) {
  return cur + std::clamp(target - cur, -max_step, max_step);
}

}  // namespace

SceneState step(const SceneState& s, const Command& cmd) {
  const WorldConfig& cfg = s.cfg();
  SceneState n = s;

  const double dy = std::isfinite(cmd.neck_delta.yaw) ? cmd.neck_delta.yaw : 0.0;
  const double dp = std::isfinite(cmd.neck_delta.pitch) ? cmd.neck_delta.pitch : 0.0;
  n.neck = geometry::clamp_to_limits(NeckPose{s.neck.yaw + std::clamp(dy, -cfg.neck_speed, cfg.neck_speed),
                                              s.neck.pitch + std::clamp(dp, -cfg.neck_speed, cfg.neck_speed)});

  const Vec3 target = cmd.arm_target.position.allFinite() ? cmd.arm_target.position : s.arm.position;
  const Vec3 delta = target - s.arm.position;
  const double dist = delta.norm();
  n.arm.position = dist <= cfg.arm_speed ? target : Vec3(s.arm.position + delta * (cfg.arm_speed / dist));
  n.arm.orientation = step_orientation(s.arm.orientation, cmd.arm_target.orientation, cfg.rot_speed);
  const double grip_target = std::isfinite(cmd.arm_target.gripper) ? std::clamp(cmd.arm_target.gripper, 0.0, 1.0)
                                                                   : s.arm.gripper;
  n.arm.gripper = move_scalar(s.arm.gripper, grip_target, cfg.grip_speed);

  // The end effector cannot pass below whatever surface lies under it.
  const double floor_under = rest_height(cfg, n.plate, n.arm.position.x(), n.arm.position.y()) - cfg.object_radius;
  if (n.arm.position.z() < floor_under) n.arm.position.z() = floor_under;

  if (!s.attached && s.arm.gripper >= 0.4 && n.arm.gripper < 0.4 &&
      (n.arm.position - s.object).norm() < cfg.grasp_radius) {
    n.attached = true;
    n.grasp_offset = s.object - n.arm.position;
  } else if (s.attached && s.arm.gripper <= 0.6 && n.arm.gripper > 0.6) {
    n.attached = false;
  }

  if (n.attached) {
    Vec3 obj = n.arm.position + n.grasp_offset;
    const double min_z = rest_height(cfg, n.plate, obj.x(), obj.y());
    if (obj.z() < min_z) {
      n.arm.position.z() += min_z - obj.z();
      obj = n.arm.position + n.grasp_offset;
    }
    n.object = obj;
    if (n.object.z() - cfg.object_radius >= cfg.lift_threshold) n.ever_lifted = true;
  } else if (s.attached) {
    n.object.z() = rest_height(cfg, n.plate, n.object.x(), n.object.y());
  }

  n.step = std::min(s.step + 1, cfg.episode_steps);
  return n;
}

bool task_success(const SceneState& s) {
  const WorldConfig& cfg = s.cfg();
  if (!s.ever_lifted || s.attached) return false;
  if (std::hypot(s.object.x() - s.plate.x(), s.object.y() - s.plate.y()) > cfg.plate_radius) return false;
  return std::abs(s.object.z() - (cfg.plate_height + cfg.object_radius)) < 1e-9;
}

std::size_t Image::count(Color c) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 2 < rgb.size(); i += 3)
    if (rgb[i] == c.r && rgb[i + 1] == c.g && rgb[i + 2] == c.b) ++n;
  return n;
}

namespace {

struct PixelRect {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive
  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

// Screen rectangle covering an axis-aligned box; the full image if any corner
// is behind the eye.
PixelRect screen_rect(const CameraIntrinsics& k, const CameraPose& eye, const Vec3& lo, const Vec3& hi) {
  double xmin = std::numeric_limits<double>::infinity(), ymin = xmin;
  double xmax = -xmin, ymax = -xmin;
  for (int i = 0; i < 8; ++i) {
    const Vec3 p((i & 1) ? hi.x() : lo.x(), (i & 2) ? hi.y() : lo.y(), (i & 4) ? hi.z() : lo.z());
    const Vec3 c = geometry::to_camera(eye, p);
    if (c.z() <= 1e-6) return PixelRect{0, 0, k.width - 1, k.height - 1};
    const double u = k.cx + k.fx * c.x() / c.z(), v = k.cy + k.fy * c.y() / c.z();
    xmin = std::min(xmin, u);
    xmax = std::max(xmax, u);
    ymin = std::min(ymin, v);
    ymax = std::max(ymax, v);
  }
  PixelRect r;
  r.x0 = std::max(0, static_cast<int>(std::floor(xmin)) - 1);
  r.y0 = std::max(0, static_cast<int>(std::floor(ymin)) - 1);
  r.x1 = std::min(k.width - 1, static_cast<int>(std::ceil(xmax)) + 1);
  r.y1 = std::min(k.height - 1, static_cast<int>(std::ceil(ymax)) + 1);
  return r;
}

double ray_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  const Vec3 oc = o - c;
  const double b = oc.dot(d), cc = oc.squaredNorm() - r * r, a = d.squaredNorm();
  const double disc = b * b - a * cc;
  if (disc < 0.0) return -1.0;
  const double sq = std::sqrt(disc);
  double t = (-b - sq) / a;
  if (t <= 0.0) t = (-b + sq) / a;
  return t;
}

double ray_box(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (o[i] < lo[i] || o[i] > hi[i]) return -1.0;
      continue;
    }
    double t0 = (lo[i] - o[i]) / d[i], t1 = (hi[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return -1.0;
  }
  return tmin > 0.0 ? tmin : -1.0;
}

struct Drawable {
  enum Kind { Sphere, Box, Disc } kind;
  Vec3 a, b;  // sphere: center, (r,0,0); box: lo, hi; disc: center, (r, z, 0)
  Color color;
  PixelRect rect;
};

}  // namespace

Image render_eye(const SceneState& s, const CameraPose& eye) {
  const WorldConfig& cfg = s.cfg();
  const CameraIntrinsics k = intrinsics(cfg);
  Image img(cfg.width, cfg.height);

  std::vector<Drawable> items;
  const double r = cfg.object_radius;
  const Vec3 rv(r, r, r);
  items.push_back({Drawable::Sphere, s.object, Vec3(r, 0, 0), palette::kObject,
                   screen_rect(k, eye, s.object - rv, s.object + rv)});
  const Vec3 marker = s.arm.position + Vec3(0, 0, cfg.gripper_marker_height);
  const double mr = cfg.gripper_marker_radius;
  const Vec3 mv(mr, mr, mr);
  items.push_back(
      {Drawable::Sphere, marker, Vec3(mr, 0, 0), palette::kGripper, screen_rect(k, eye, marker - mv, marker + mv)});
  const Vec3 pc(s.plate.x(), s.plate.y(), cfg.plate_height);
  const Vec3 pr(cfg.plate_radius, cfg.plate_radius, 0.0);
  items.push_back({Drawable::Disc, pc, Vec3(cfg.plate_radius, cfg.plate_height, 0), palette::kPlate,
                   screen_rect(k, eye, pc - pr, pc + pr)});
  for (const auto& b : *s.clutter) {
    items.push_back({Drawable::Box, b.center - b.half, b.center + b.half, b.color,
                     screen_rect(k, eye, b.center - b.half, b.center + b.half)});
  }

  const Vec3 o = eye.position;
  const double hw = cfg.desk_width / 2.0, y0 = cfg.desk_near_y, y1 = cfg.desk_near_y + cfg.desk_depth;
  for (int py = 0; py < k.height; ++py) {
    for (int px = 0; px < k.width; ++px) {
      const Vec3 dc((px + 0.5 - k.cx) / k.fx, (py + 0.5 - k.cy) / k.fy, 1.0);
      const Vec3 d = eye.orientation * dc;
      double best = std::numeric_limits<double>::infinity();
      Color col = palette::kBackground;
      if (d.z() < 0.0) {
        const double tf = (cfg.floor_z - o.z()) / d.z();
        if (tf > 0.0) {
          best = tf;
          col = palette::kFloor;
        }
        const double td = -o.z() / d.z();
        if (td > 0.0 && td < best) {
          const Vec3 h = o + td * d;
          if (std::abs(h.x()) <= hw && h.y() >= y0 && h.y() <= y1) {
            best = td;
            col = palette::kDesk;
          }
        }
      }
      for (const auto& it : items) {
        if (!it.rect.contains(px, py)) continue;
        double t = -1.0;
        switch (it.kind) {
          case Drawable::Sphere: t = ray_sphere(o, d, it.a, it.b.x()); break;
          case Drawable::Box: t = ray_box(o, d, it.a, it.b); break;
          case Drawable::Disc:
            if (std::abs(d.z()) > 1e-12) {
              const double tt = (it.a.z() - o.z()) / d.z();
              const Vec3 h = o + tt * d;
              if (tt > 0.0 && std::hypot(h.x() - it.a.x(), h.y() - it.a.y()) <= it.b.x()) t = tt;
            }
            break;
        }
        if (t > 0.0 && t < best) {
          best = t;
          col = it.color;
        }
      }
      const std::size_t i = (static_cast<std::size_t>(py) * k.width + px) * 3;
      img.rgb[i] = col.r;
      img.rgb[i + 1] = col.g;
      img.rgb[i + 2] = col.b;
    }
  }
  return img;
}

StereoFrame render(const SceneState& s) {
  const auto eyes = eye_poses(s.cfg(), s.neck);
  StereoFrame f;
  f.left_pose = eyes[0];
  f.right_pose = eyes[1];
  f.left = render_eye(s, eyes[0]);
  f.right = render_eye(s, eyes[1]);
  return f;
}

double gaze_sigma(const WorldConfig& cfg, double e) {
  const double hinge = std::max(0.0, e - cfg.gaze_e0) / (1.0 - cfg.gaze_e0);
  return cfg.gaze_sigma0 * cfg.width * (1.0 + cfg.gaze_kappa * hinge);
}

double eccentricity(const WorldConfig& cfg, double x, double y) {
  const double hx = cfg.width / 2.0, hy = cfg.height / 2.0;
  return std::hypot(x - hx, y - hy) / std::hypot(hx, hy);
}

GazeSample sample_gaze(const SceneState& s, const Vec3& target, std::mt19937_64& rng) {
  const WorldConfig& cfg = s.cfg();
  const CameraIntrinsics k = intrinsics(cfg);
  const auto eyes = eye_poses(cfg, s.neck);
  std::normal_distribution<double> n01(0.0, 1.0);
  double noise[4];
  for (double& v : noise) v = n01(rng);  // always drawn so the stream does not depend on validity

  GazeSample g;
  g.valid = true;
  double out[4];
  for (int e = 0; e < 2; ++e) {
    const auto p = geometry::project_point(k, eyes[e], target);
    if (!p || p->x < 0.0 || p->x > cfg.width || p->y < 0.0 || p->y > cfg.height) {
      g.valid = false;
      break;
    }
    const double sigma = gaze_sigma(cfg, eccentricity(cfg, p->x, p->y));
    out[2 * e] = std::clamp(p->x + sigma * noise[2 * e], 0.0, cfg.width - 1.0);
    out[2 * e + 1] = std::clamp(p->y + sigma * noise[2 * e + 1], 0.0, cfg.height - 1.0);
  }
  if (!g.valid) {
    g.lx = g.rx = cfg.width / 2.0;
    g.ly = g.ry = cfg.height / 2.0;
    return g;
  }
  g.lx = out[0];
  g.ly = out[1];
  g.rx = out[2];
  g.ry = out[3];
  return g;
}

}  // namespace gazeneck::sim
