#include "gazeneck/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gazeneck/errors.hpp"

namespace gazeneck::geometry {

namespace {

constexpr double kDegenerateNorm = 1e-12;
constexpr double kMinDepth = 1e-6;

Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << 1, 0, 0, 0, c, -s, 0, s, c;
  return m;
}

Mat3 rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << c, -s, 0, s, c, 0, 0, 0, 1;
  return m;
}

}  // namespace

double deg2rad(double deg) { return deg * kPi / 180.0; }

std::array<double, 6> Rot6::flat() const { return {a1.x(), a1.y(), a1.z(), a2.x(), a2.y(), a2.z()}; }

Rot6 Rot6::from_flat(const double* v) { return Rot6{Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5])}; }

RotationMatrix rot6_decode(const Rot6& v) {
  const double n1 = v.a1.norm();
  if (!(n1 >= kDegenerateNorm)) throw DegenerateInput("rot6_decode: first column vanishes");
  const Vec3 b1 = v.a1 / n1;
  const Vec3 u2 = v.a2 - b1.dot(v.a2) * b1;
  const double n2 = u2.norm();
  if (!(n2 >= kDegenerateNorm)) throw DegenerateInput("rot6_decode: second column parallel to first");
  const Vec3 b2 = u2 / n2;
  RotationMatrix r;
  r.col(0) = b1;
  r.col(1) = b2;
  r.col(2) = b1.cross(b2);
  return r;
}

Rot6 rot6_encode(const RotationMatrix& r) { return Rot6{r.col(0), r.col(1)}; }

bool is_rotation(const RotationMatrix& r, double tol) {
  if (!r.allFinite()) return false;
  const Mat3 gram = r.transpose() * r;
  return (gram - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

CameraIntrinsics make_intrinsics(int width, int height, double hfov, double vfov) {
  if (width <= 0 || height <= 0) throw InvalidFov("make_intrinsics: image size must be positive");
  if (!(hfov > 0.0 && hfov < kPi) || !(vfov > 0.0 && vfov < kPi))
    throw InvalidFov("make_intrinsics: field of view must lie in (0, pi)");
  CameraIntrinsics k;
  k.width = width;
  k.height = height;
  k.hfov = hfov;
  k.vfov = vfov;
  k.fx = width / (2.0 * std::tan(hfov / 2.0));
  k.fy = height / (2.0 * std::tan(vfov / 2.0));
  k.cx = width / 2.0;
  k.cy = height / 2.0;
  return k;
}

bool within_limits(const NeckPose& neck) {
  return std::abs(neck.yaw) <= kYawLimit && neck.pitch >= kPitchMin && neck.pitch <= kPitchMax;
}

NeckPose clamp_to_limits(const NeckPose& neck) {
  return NeckPose{std::clamp(neck.yaw, -kYawLimit, kYawLimit), std::clamp(neck.pitch, kPitchMin, kPitchMax)};
}

RotationMatrix forward_base_orientation() {
  RotationMatrix b;
  b.col(0) = Vec3(1, 0, 0);
  b.col(1) = Vec3(0, 0, -1);
  b.col(2) = Vec3(0, 1, 0);
  return b;
}

RotationMatrix head_orientation(double yaw, double pitch) {
  return rot_z(-yaw) * rot_x(pitch) * forward_base_orientation();
}

CameraPose neck_to_camera_pose(const NeckPose& neck, const Vec3& rig) {
  if (!within_limits(neck))
    throw LimitExceeded("neck pose (" + std::to_string(neck.yaw) + ", " + std::to_string(neck.pitch) +
                        ") outside limits");
  return CameraPose{rig, head_orientation(neck.yaw, neck.pitch)};
}

CameraPose eye_pose(const CameraPose& rig_pose, double offset) {
  return CameraPose{rig_pose.position + rig_pose.orientation.col(0) * offset, rig_pose.orientation};
}

Vec3 to_camera(const CameraPose& pose, const Vec3& p) { return pose.orientation.transpose() * (p - pose.position); }

std::optional<Pixel> project_point(const CameraIntrinsics& k, const CameraPose& pose, const Vec3& p) {
  const Vec3 c = to_camera(pose, p);
  if (c.z() <= kMinDepth) return std::nullopt;
  return Pixel{k.cx + k.fx * c.x() / c.z(), k.cy + k.fy * c.y() / c.z()};
}

const char* to_string(ViewStatus s) {
  switch (s) {
    case ViewStatus::InView: return "InView";
    case ViewStatus::Partial: return "Partial";
    case ViewStatus::Outside: return "Outside";
  }
  return "?";
}

namespace {

struct FrustumShape {
  std::array<Vec3, 4> edges;    // tl, tr, br, bl ray directions
  std::array<Vec3, 4> normals;  // inward unit normals of faces (tl-tr, tr-br, br-bl, bl-tl)
};

FrustumShape frustum_shape(const CameraIntrinsics& k) {
  const double tx = std::tan(k.hfov / 2.0), ty = std::tan(k.vfov / 2.0);
  FrustumShape f;
  f.edges = {Vec3(-tx, -ty, 1), Vec3(tx, -ty, 1), Vec3(tx, ty, 1), Vec3(-tx, ty, 1)};
  f.normals = {Vec3(0, 1, ty).normalized(), Vec3(-1, 0, tx).normalized(), Vec3(0, -1, ty).normalized(),
               Vec3(1, 0, tx).normalized()};
  return f;
}

}  // namespace

double distance_to_frustum(const CameraIntrinsics& k, const Vec3& p) {
  const FrustumShape f = frustum_shape(k);
  bool inside = true;
  for (const Vec3& n : f.normals) inside = inside && n.dot(p) >= 0.0;
  if (inside) return 0.0;

  double best = std::numeric_limits<double>::infinity();
  for (const Vec3& d : f.edges) {
    const double t = std::max(0.0, p.dot(d) / d.squaredNorm());
    best = std::min(best, (p - t * d).norm());
  }
  for (int i = 0; i < 4; ++i) {
    const Vec3& n = f.normals[i];
    const double s = n.dot(p);
    if (s >= 0.0) continue;  // p is on the inner side of this face's plane
    const Vec3 q = p - s * n;
    const Vec3& da = f.edges[i];
    const Vec3& db = f.edges[(i + 1) % 4];
    const Vec3 axis = da.cross(db);
    const double denom = axis.squaredNorm();
    const double alpha = q.cross(db).dot(axis) / denom;
    const double beta = da.cross(q).dot(axis) / denom;
    if (alpha >= 0.0 && beta >= 0.0) best = std::min(best, -s);
  }
  return best;
}

ViewStatus sphere_view_status(const CameraIntrinsics& k, const CameraPose& pose, const Vec3& center,
                              double radius) {
  const Vec3 c = to_camera(pose, center);
  const FrustumShape f = frustum_shape(k);
  double margin = std::numeric_limits<double>::infinity();
  for (const Vec3& n : f.normals) margin = std::min(margin, n.dot(c));
  if (margin >= radius) return ViewStatus::InView;
  if (distance_to_frustum(k, c) > radius) return ViewStatus::Outside;
  return ViewStatus::Partial;
}

std::array<Vec3, 4> VirtualPlane::corners() const {
  const Vec3 right = orientation.col(0) * half_width;
  const Vec3 down = orientation.col(1) * half_height;
  return {center - right - down, center + right - down, center + right + down, center - right + down};
}

VirtualPlane decoupled_plane(const RotationMatrix& camera_orientation, const Vec3& eye_position, double distance,
                             const CameraIntrinsics& k) {
  if (!(distance > 0.0)) throw ConfigError("decoupled_plane: distance must be positive");
  VirtualPlane plane;
  plane.orientation = camera_orientation;
  plane.distance = distance;
  plane.center = eye_position + camera_orientation * Vec3(0.0, 0.0, distance);
  plane.half_width = distance * std::tan(k.hfov / 2.0);
  plane.half_height = distance * std::tan(k.vfov / 2.0);
  return plane;
}

std::optional<std::array<Pixel, 4>> plane_corners_in_head_view(const VirtualPlane& plane, const RotationMatrix& head,
                                                                const CameraIntrinsics& display) {
  const CameraPose view{plane.eye(), head};
  std::array<Pixel, 4> out;
  const auto corners = plane.corners();
  for (int i = 0; i < 4; ++i) {
    const Vec3 c = to_camera(view, corners[i]);
    if (c.z() <= 0.0) return std::nullopt;
    out[i] = Pixel{display.cx + display.fx * c.x() / c.z(), display.cy + display.fy * c.y() / c.z()};
  }
  return out;
}

}  // namespace gazeneck::geometry
