#pragma once

#include <array>
#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>

// Rotation representations, pinhole camera model, frustum tests, neck
// kinematics and the decoupled virtual-plane projection.
//
// World frame: x to the robot's right, y forward, z up; the desk surface is
// z = 0. Camera frame: x right, y down (image rows), z along the optical axis.
// A camera orientation matrix maps camera-frame vectors to the world frame.
namespace gazeneck::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using RotationMatrix = Mat3;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kYawLimit = 1.2;
inline constexpr double kPitchMin = -1.2;
inline constexpr double kPitchMax = 0.0;

double deg2rad(double deg);

// First two columns of a rotation matrix.
struct Rot6 {
  Vec3 a1 = Vec3::UnitX();
  Vec3 a2 = Vec3::UnitY();

  std::array<double, 6> flat() const;
  static Rot6 from_flat(const double* v);
  bool operator==(const Rot6&) const = default;
};

// Gram-Schmidt decode. Throws DegenerateInput when a1 vanishes or a2 is
// parallel to a1 (norm below 1e-12).
RotationMatrix rot6_decode(const Rot6& v);
Rot6 rot6_encode(const RotationMatrix& r);

// RᵀR = I and det = +1, both within tol.
bool is_rotation(const RotationMatrix& r, double tol = 1e-9);

struct CameraIntrinsics {
  int width = 0;
  int height = 0;
  double hfov = 0.0;
  double vfov = 0.0;
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
};

// Throws InvalidFov for non-positive sizes or fov outside (0, π).
CameraIntrinsics make_intrinsics(int width, int height, double hfov, double vfov);

struct NeckPose {
  double yaw = 0.0;    // positive turns right
  double pitch = 0.0;  // 0 is level, negative looks down
  bool operator==(const NeckPose&) const = default;
};

bool within_limits(const NeckPose& neck);
NeckPose clamp_to_limits(const NeckPose& neck);

struct CameraPose {
  Vec3 position = Vec3::Zero();
  RotationMatrix orientation = RotationMatrix::Identity();
};

struct Pixel {
  double x = 0.0;
  double y = 0.0;
};

// Camera looking along world +y with image rows pointing down (world -z).
RotationMatrix forward_base_orientation();

// Orientation for an arbitrary (yaw, pitch); no limit check. Used for the
// operator's head, which is not bound by the robot's neck limits.
RotationMatrix head_orientation(double yaw, double pitch);

// Throws LimitExceeded when the pose is outside the neck's range.
CameraPose neck_to_camera_pose(const NeckPose& neck, const Vec3& rig);

// Stereo eye pose: the rig pose shifted by `offset` along the camera x axis.
CameraPose eye_pose(const CameraPose& rig_pose, double offset);

// Point in camera coordinates.
Vec3 to_camera(const CameraPose& pose, const Vec3& p);

// std::nullopt when the point is behind the camera (depth <= 1e-6).
std::optional<Pixel> project_point(const CameraIntrinsics& k, const CameraPose& pose, const Vec3& p);

enum class ViewStatus { InView, Partial, Outside };
const char* to_string(ViewStatus s);

// Exact sphere vs. infinite pyramidal frustum classification.
ViewStatus sphere_view_status(const CameraIntrinsics& k, const CameraPose& pose, const Vec3& center,
                              double radius);

// Euclidean distance from a camera-frame point to the frustum cone (0 inside).
double distance_to_frustum(const CameraIntrinsics& k, const Vec3& p_cam);

struct VirtualPlane {
  Vec3 center = Vec3::Zero();
  RotationMatrix orientation = RotationMatrix::Identity();
  double half_width = 0.0;
  double half_height = 0.0;
  double distance = 0.0;

  // Eye position the plane was built for.
  Vec3 eye() const { return center - orientation * Vec3(0.0, 0.0, distance); }
  // Corners in display order: top-left, top-right, bottom-right, bottom-left.
  std::array<Vec3, 4> corners() const;
};

// Plane anchored to the camera orientation; it does not depend on the head.
VirtualPlane decoupled_plane(const RotationMatrix& camera_orientation, const Vec3& eye_position,
                             double distance, const CameraIntrinsics& k);

// Corners of the plane as seen by a display camera at the plane's eye point
// with the head's orientation. std::nullopt if any corner has depth <= 0.
std::optional<std::array<Pixel, 4>> plane_corners_in_head_view(const VirtualPlane& plane,
                                                                const RotationMatrix& head,
                                                                const CameraIntrinsics& display);

}  // namespace gazeneck::geometry
