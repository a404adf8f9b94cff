#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "splatfix/camera.hpp"
#include "splatfix/hash.hpp"
#include "splatfix/image.hpp"
#include "splatfix/rng.hpp"
#include "splatfix/serial.hpp"

using namespace splatfix;

namespace {
std::string tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "splatfix_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}
}  // namespace

TEST_CASE("rng streams are deterministic and independent") {
  Rng a = Rng::stream(42, "fit");
  Rng b = Rng::stream(42, "fit");
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c = Rng::stream(42, "ddim");
  Rng d = Rng::stream(42, "fit");
  bool all_equal = true;
  for (int i = 0; i < 16; ++i) all_equal &= (c.next_u64() == d.next_u64());
  CHECK_FALSE(all_equal);
}

TEST_CASE("rng moments are sane") {
  Rng r(7);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.02);
  CHECK(std::abs(s2 / n - 1.0) < 0.03);

  double u = 0;
  for (int i = 0; i < n; ++i) u += r.uniform();
  CHECK(std::abs(u / n - 0.5) < 0.01);
}

TEST_CASE("png round trip preserves 8-bit data") {
  Image img(17, 9, 3);
  Rng r(3);
  for (auto& v : img.data) v = std::floor(r.uniform() * 256.0) / 255.0;
  img.clamp01();

  const auto path = tmp_path("roundtrip.png");
  save_png(path, img);
  const Image back = load_png(path);
  REQUIRE(back.same_shape(img));
  for (size_t i = 0; i < img.data.size(); ++i)
    CHECK(std::abs(back.data[i] - std::clamp(img.data[i], 0.0, 1.0)) < 0.5 / 255.0 + 1e-12);
}

TEST_CASE("depth round trip is exact at float32") {
  Image d(13, 7, 1);
  Rng r(5);
  for (auto& v : d.data) v = r.uniform(0.0, 10.0);
  const auto path = tmp_path("depth.bin");
  save_depth(path, d);
  const Image back = load_depth(path);
  REQUIRE(back.same_shape(d));
  for (size_t i = 0; i < d.data.size(); ++i)
    CHECK(back.data[i] == doctest::Approx(d.data[i]).epsilon(1e-7));
}

TEST_CASE("camera look-at geometry") {
  const Eigen::Vector3d eye(0, 0, -3), target(0, 0, 0);
  Camera cam = look_at_camera(eye, target, 100, 100, 48, 48, 96, 96);

  // Forward axis points from eye to target.
  const Eigen::Vector3d fwd = cam.rot_wc().col(2);
  CHECK((fwd - Eigen::Vector3d(0, 0, 1)).norm() < 1e-12);

  // Target projects to the principal point at depth 3.
  const Eigen::Vector3d pc = cam.world_to_cam(target);
  CHECK(pc.z() == doctest::Approx(3.0));
  const auto uv = cam.project_cam(pc);
  CHECK(uv.x() == doctest::Approx(48.0));
  CHECK(uv.y() == doctest::Approx(48.0));

  // A point above the target (world +y up) lands in the upper image half.
  const Eigen::Vector3d above = cam.world_to_cam(Eigen::Vector3d(0, 0.5, 0));
  CHECK(cam.project_cam(above).y() < 48.0);

  // Ray through the pixel center recovers the point: depth equals camera z.
  const Eigen::Vector3d p(0.3, -0.2, 0.4);
  const Eigen::Vector3d q = cam.world_to_cam(p);
  const auto uvp = cam.project_cam(q);
  const Eigen::Vector3d hit = cam.position() + q.z() * cam.ray_dir_world(uvp.x(), uvp.y());
  CHECK((hit - p).norm() < 1e-9);
}

TEST_CASE("camera validation rejects bad inputs") {
  Camera cam = look_at_camera({0, 0, -3}, {0, 0, 0}, 100, 100, 48, 48, 96, 96);
  CHECK_NOTHROW(cam.validate());

  Camera bad = cam;
  bad.fx = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cam;
  bad.pose_wc(0, 0) += 0.01;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cam;
  bad.cx = 96;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("fnv and directory hashing") {
  CHECK(fnv1a64(std::string("")) == 1469598103934665603ull);
  CHECK(fnv1a64(std::string("a")) != fnv1a64(std::string("b")));

  const auto dir = tmp_path("hashdir");
  std::filesystem::create_directories(dir);
  write_text_file(dir + "/x.txt", "hello");
  write_text_file(dir + "/y.txt", "world");
  const uint64_t h1 = hash_dir(dir);
  const uint64_t h2 = hash_dir(dir);
  CHECK(h1 == h2);
  write_text_file(dir + "/y.txt", "world!");
  CHECK(hash_dir(dir) != h1);
}
