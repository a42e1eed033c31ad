#include "gazeneck/teleop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <filesystem>
#include <random>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include "gazeneck/errors.hpp"
#include "gazeneck/util.hpp"

namespace gazeneck::teleop {

namespace fs = std::filesystem;
namespace asio = boost::asio;
namespace beast = boost::beast;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;
using asio::ip::tcp;

namespace {

std::string base64(const std::vector<std::uint8_t>& bytes) {
  std::string out(beast::detail::base64::encoded_size(bytes.size()), '\0');
  out.resize(beast::detail::base64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

double number(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_number()) throw ProtocolError(std::string("missing number '") + key + "'");
  const double v = it->get<double>();
  if (!std::isfinite(v)) throw ProtocolError(std::string("non-finite '") + key + "'");
  return v;
}

std::string error_message(const std::string& msg) { return json{{"t", "err"}, {"msg", msg}}.dump(); }

}  // namespace

nlohmann::ordered_json plane_json(const geometry::VirtualPlane& p) {
  ordered_json o = ordered_json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) o.push_back(p.orientation(r, c));
  return ordered_json{{"center", {p.center.x(), p.center.y(), p.center.z()}},
          {"orientation", o},
          {"half_width", p.half_width},
          {"half_height", p.half_height},
          {"distance", p.distance}};
}

// ---------------------------------------------------------------- session

TeleopSession::TeleopSession(const sim::WorldConfig& cfg, std::string out_dir, TeleopOptions opt)
    : cfg_(cfg), out_dir_(std::move(out_dir)), opt_(opt) {
  cfg_.validate();
  if (opt_.lag_steps < 0) throw ConfigError("camera lag must be >= 0 steps");
  const auto cells = sim::grid_positions(cfg_);
  s_ = sim::new_scene(cfg_, cells[cells.size() / 2], opt_.seed);
  in_.head = s_.neck;
  in_.arm = s_.arm.flat();
  published_ = s_;
  if (fs::exists(out_dir_)) next_episode_id_ = static_cast<int>(dataset::list_episodes(out_dir_).size());
}

std::optional<std::string> TeleopSession::handle(const std::string& line) {
  try {
    const json j = json::parse(line);
    if (!j.is_object() || !j.contains("t") || !j["t"].is_string()) throw ProtocolError("message needs a string 't'");
    const std::string t = j["t"];
    std::lock_guard lk(mu_);
    if (t == "head") {
      in_.head = {number(j, "yaw"), number(j, "pitch")};
    } else if (t == "arm") {
      const auto it = j.find("target");
      if (it == j.end() || !it->is_array() || it->size() != 10) throw ProtocolError("arm target needs 10 numbers");
      std::array<double, 10> v{};
      for (int k = 0; k < 10; ++k) {
        if (!(*it)[k].is_number() || !std::isfinite((*it)[k].get<double>()))
          throw ProtocolError("arm target needs 10 finite numbers");
        v[k] = (*it)[k].get<double>();
      }
      v[9] = std::clamp(v[9], 0.0, 1.0);
      in_.arm = v;
    } else if (t == "grip") {
      in_.arm[9] = std::clamp(number(j, "v"), 0.0, 1.0);
    } else if (t == "gaze") {
      in_.gaze = {number(j, "lx"), number(j, "ly"), number(j, "rx"), number(j, "ry")};
      in_.gaze_valid = true;
    } else if (t == "rec") {
      if (!j.contains("on") || !j["on"].is_boolean()) throw ProtocolError("rec needs a boolean 'on'");
      in_.rec = j["on"].get<bool>();
    } else if (t == "mode") {
      if (!j.contains("decoupled") || !j["decoupled"].is_boolean())
        throw ProtocolError("mode needs a boolean 'decoupled'");
      in_.decoupled = j["decoupled"].get<bool>();
    } else {
      throw ProtocolError("unknown message type '" + t + "'");
    }
  } catch (const json::exception& e) {
    return error_message(std::string("malformed message: ") + e.what());
  } catch (const ProtocolError& e) {
    return error_message(e.what());
  }
  return std::nullopt;
}

void TeleopSession::start_recording() {
  // Every recording starts from a fresh scene so it can be replayed from its
  // placement and seed alone.
  const std::uint64_t seed = mix_seed(opt_.seed, ++placements_);
  const auto cells = sim::grid_positions(cfg_);
  std::mt19937_64 rng(seed);
  const auto& cell = cells[rng() % cells.size()];
  std::uniform_real_distribution<double> u(-cfg_.placement_jitter, cfg_.placement_jitter);
  const double x = std::clamp(cell.position.x() + u(rng), 0.0, cfg_.area_width);
  const double y = std::clamp(cell.position.y() + u(rng), cfg_.desk_near_y, cfg_.desk_near_y + cfg_.area_depth);
  s_ = sim::new_scene(cfg_, sim::Vec3(x, y, 0.0), seed);
  rec_cell_ = cell.id;
  rec_position_ = s_.object;
  head_history_.clear();
  {
    std::lock_guard lk(mu_);
    in_.arm = s_.arm.flat();
    in_.gaze_valid = false;
  }
  const std::string name = dataset::episode_dir_name(next_episode_id_);
  writer_ = std::make_unique<dataset::EpisodeWriter>((fs::path(out_dir_) / name).string(), cfg_.width, cfg_.height);
  recording_ = true;
  rec_steps_ = 0;
  spdlog::info("recording {} (cell {})", name, rec_cell_);
}

void TeleopSession::stop_recording() {
  dataset::EpisodeMeta meta;
  meta.episode_id = next_episode_id_;
  meta.with_neck = true;
  meta.seed = s_.seed;
  meta.config = cfg_.serialize();
  meta.width = cfg_.width;
  meta.height = cfg_.height;
  meta.object_cell = rec_cell_;
  meta.success = sim::task_success(s_);
  meta.object_position = {rec_position_.x(), rec_position_.y(), rec_position_.z()};
  writer_->finish(meta);
  writer_.reset();
  recording_ = false;

  dataset::Manifest m;
  if (fs::exists(fs::path(out_dir_) / "manifest.json")) m = dataset::read_manifest(out_dir_);
  m.with_neck = true;
  m.config_hash = cfg_.hash();
  m.episode_dirs.push_back(dataset::episode_dir_name(next_episode_id_));
  m.episodes = static_cast<int>(m.episode_dirs.size());
  dataset::write_manifest(out_dir_, m);
  ++next_episode_id_;
  ++episodes_written_;
  spdlog::info("recording stopped after {} steps, success {}", rec_steps_, meta.success);
}

std::vector<std::string> TeleopSession::tick() {
  Inputs in;
  {
    std::lock_guard lk(mu_);
    in = in_;
    in_.rec.reset();
  }
  if (in.rec) {
    if (*in.rec && !recording_) {
      start_recording();
      std::lock_guard lk(mu_);
      in = in_;
    } else if (!*in.rec && recording_) {
      stop_recording();
    }
  }

  // The camera chases the head command issued lag_steps ago, within the neck
  // limits and speed.
  if (head_history_.empty()) head_history_.assign(opt_.lag_steps, s_.neck);
  head_history_.push_back(in.head);
  while (static_cast<int>(head_history_.size()) > opt_.lag_steps + 1) head_history_.pop_front();
  const geometry::NeckPose want = geometry::clamp_to_limits(head_history_.front());
  sim::Command cmd;
  cmd.neck_delta = {std::clamp(want.yaw - s_.neck.yaw, -cfg_.neck_speed, cfg_.neck_speed),
                    std::clamp(want.pitch - s_.neck.pitch, -cfg_.neck_speed, cfg_.neck_speed)};
  cmd.arm_target = sim::ArmState::from_flat(in.arm.data());

  const bool need_frame = opt_.send_frames || recording_;
  const sim::StereoFrame frame = need_frame ? sim::render(s_) : sim::StereoFrame{};
  std::vector<std::string> out;
  if (opt_.send_frames) {
    const auto eyes = sim::eye_poses(cfg_, s_.neck);
    const auto plane = geometry::decoupled_plane(eyes[0].orientation, eyes[0].position, opt_.plane_distance,
                                                 sim::intrinsics(cfg_));
    out.push_back(ordered_json{{"t", "frame"},
                       {"step", tick_count_},
                       {"cam_yaw", s_.neck.yaw},
                       {"cam_pitch", s_.neck.pitch},
                       {"plane", plane_json(plane)},
                       {"width", cfg_.width},
                       {"height", cfg_.height},
                       {"left", base64(frame.left.rgb)},
                       {"right", base64(frame.right.rgb)}}
                      .dump());
  }
  if (recording_) {
    dataset::StepRecord r;
    r.step = rec_steps_++;
    r.neck = {s_.neck.yaw, s_.neck.pitch};
    r.arm = s_.arm.flat();
    r.gaze = in.gaze;
    r.gaze_valid = in.gaze_valid;
    r.cmd_neck = {cmd.neck_delta.yaw, cmd.neck_delta.pitch};
    r.cmd_arm = in.arm;
    writer_->append(r, frame.left.rgb.data(), frame.right.rgb.data());
  }
  s_ = sim::step(s_, cmd);
  ++tick_count_;
  {
    std::lock_guard lk(mu_);
    published_ = s_;
  }
  const auto a = s_.arm.flat();
  out.push_back(ordered_json{{"t", "state"},
                     {"arm", std::vector<double>(a.begin(), a.end())},
                     {"neck", {s_.neck.yaw, s_.neck.pitch}},
                     {"attached", s_.attached},
                     {"success", sim::task_success(s_)},
                     {"recording", recording_}}
                    .dump());
  return out;
}

sim::SceneState TeleopSession::state() const {
  std::lock_guard lk(mu_);
  return published_;
}

geometry::NeckPose TeleopSession::head() const {
  std::lock_guard lk(mu_);
  return in_.head;
}

bool TeleopSession::decoupled() const {
  std::lock_guard lk(mu_);
  return in_.decoupled;
}

// ---------------------------------------------------------------- server

namespace {

// One client connection; every method runs on the I/O thread.
class Connection : public std::enable_shared_from_this<Connection> {
 public:
  explicit Connection(TeleopSession& session) : session_(session) {}
  virtual ~Connection() = default;
  virtual void start() = 0;
  virtual void close() = 0;
  bool open() const { return open_; }

  void send(std::string msg, bool droppable) {
    // Frames are dropped rather than queued behind a slow client.
    if (droppable && queue_.size() > 4) return;
    queue_.push_back(std::move(msg));
    if (queue_.size() == 1) write_next();
  }

 protected:
  virtual void async_write_one(const std::string& msg, std::function<void(beast::error_code)> done) = 0;

  void on_line(const std::string& line) {
    if (line.empty() || line == "\r") return;
    if (auto err = session_.handle(line)) send(*err, false);
  }

  void write_next() {
    auto self = shared_from_this();
    async_write_one(queue_.front(), [self](beast::error_code ec) {
      self->queue_.pop_front();
      if (ec) {
        self->open_ = false;
        self->queue_.clear();
        return;
      }
      if (!self->queue_.empty()) self->write_next();
    });
  }

  TeleopSession& session_;
  std::deque<std::string> queue_;
  bool open_ = true;
};

class LineConnection : public Connection {
 public:
  LineConnection(TeleopSession& s, tcp::socket sock) : Connection(s), sock_(std::move(sock)) {}
  void start() override { read(); }
  void close() override {
    beast::error_code ec;
    sock_.shutdown(tcp::socket::shutdown_both, ec);
    sock_.close(ec);
    open_ = false;
  }

 private:
  void read() {
    auto self = std::static_pointer_cast<LineConnection>(shared_from_this());
    asio::async_read_until(sock_, buf_, '\n', [self](beast::error_code ec, std::size_t n) {
      if (ec) {
        self->open_ = false;
        return;
      }
      std::string line(asio::buffers_begin(self->buf_.data()), asio::buffers_begin(self->buf_.data()) + n - 1);
      self->buf_.consume(n);
      self->on_line(line);
      self->read();
    });
  }
  void async_write_one(const std::string& msg, std::function<void(beast::error_code)> done) override {
    line_ = msg + "\n";
    asio::async_write(sock_, asio::buffer(line_), [done](beast::error_code ec, std::size_t) { done(ec); });
  }

  tcp::socket sock_;
  asio::streambuf buf_;
  std::string line_;
};

class WsConnection : public Connection {
 public:
  WsConnection(TeleopSession& s, tcp::socket sock) : Connection(s), ws_(std::move(sock)) {}
  void start() override {
    auto self = std::static_pointer_cast<WsConnection>(shared_from_this());
    beast::http::async_read(ws_.next_layer(), buf_, req_, [self](beast::error_code ec, std::size_t) {
      if (ec || !beast::websocket::is_upgrade(self->req_)) {
        self->close();
        return;
      }
      self->ws_.text(true);
      self->ws_.async_accept(self->req_, [self](beast::error_code ec2) {
        if (ec2) {
          self->open_ = false;
          return;
        }
        self->buf_.clear();
        self->read();
      });
    });
  }
  void close() override {
    beast::error_code ec;
    ws_.next_layer().shutdown(tcp::socket::shutdown_both, ec);
    ws_.next_layer().close(ec);
    open_ = false;
  }

 private:
  void read() {
    auto self = std::static_pointer_cast<WsConnection>(shared_from_this());
    ws_.async_read(buf_, [self](beast::error_code ec, std::size_t) {
      if (ec) {
        self->open_ = false;
        return;
      }
      const std::string msg = beast::buffers_to_string(self->buf_.data());
      self->buf_.consume(self->buf_.size());
      // A text message may still hold several newline-separated messages.
      std::size_t start = 0;
      for (std::size_t nl; (nl = msg.find('\n', start)) != std::string::npos; start = nl + 1)
        self->on_line(msg.substr(start, nl - start));
      self->on_line(msg.substr(start));
      self->read();
    });
  }
  void async_write_one(const std::string& msg, std::function<void(beast::error_code)> done) override {
    line_ = msg;
    ws_.async_write(asio::buffer(line_), [done](beast::error_code ec, std::size_t) { done(ec); });
  }

  beast::websocket::stream<tcp::socket> ws_;
  beast::flat_buffer buf_;
  beast::http::request<beast::http::string_body> req_;
  std::string line_;
};

}  // namespace

struct TeleopServer::Impl {
  Impl(const sim::WorldConfig& cfg, std::string out, TeleopOptions o)
      : opt(o), session(cfg, std::move(out), o), acceptor(io) {}

  void accept() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket sock) {
      if (ec) return;
      // Peek at the first bytes to tell a WebSocket upgrade from raw lines.
      auto s = std::make_shared<tcp::socket>(std::move(sock));
      auto head = std::make_shared<std::array<char, 4>>();
      s->async_receive(asio::buffer(*head), tcp::socket::message_peek,
                       [this, s, head](beast::error_code ec2, std::size_t n) {
                         if (!ec2) {
                           if (conn && conn->open()) conn->close();  // one client at a time
                           const bool http = n == 4 && std::string(head->data(), 4) == "GET ";
                           if (http) conn = std::make_shared<WsConnection>(session, std::move(*s));
                           else conn = std::make_shared<LineConnection>(session, std::move(*s));
                           conn->start();
                         }
                         accept();
                       });
    });
  }

  void sim_loop() {
    auto next = std::chrono::steady_clock::now();
    const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
        std::chrono::duration<double>(opt.tick_seconds));
    while (!stopping) {
      std::vector<std::string> msgs;
      try {
        msgs = session.tick();
      } catch (const std::exception& e) {
        spdlog::error("sim step failed: {}", e.what());
        msgs = {error_message(e.what())};
      }
      asio::post(io, [this, msgs = std::move(msgs)]() mutable {
        if (!conn || !conn->open()) return;
        for (auto& m : msgs) {
          const bool frame = m.rfind("{\"t\":\"frame\"", 0) == 0;
          conn->send(std::move(m), frame);
        }
      });
      next += period;
      std::unique_lock lk(stop_mu);
      stop_cv.wait_until(lk, next, [this] { return stopping.load(); });
    }
  }

  TeleopOptions opt;
  TeleopSession session;
  asio::io_context io;
  tcp::acceptor acceptor;
  std::shared_ptr<Connection> conn;
  std::atomic<bool> stopping{false};
  std::mutex stop_mu;
  std::condition_variable stop_cv;
};

TeleopServer::TeleopServer(const sim::WorldConfig& cfg, std::string out_dir, TeleopOptions opt)
    : impl_(std::make_unique<Impl>(cfg, std::move(out_dir), opt)) {}

TeleopServer::~TeleopServer() = default;

int TeleopServer::bind(int port, const std::string& address) {
  if (port < 0 || port > 65535) throw ConfigError("port out of range: " + std::to_string(port));
  beast::error_code ec;
  const tcp::endpoint ep(asio::ip::make_address(address), static_cast<unsigned short>(port));
  auto& a = impl_->acceptor;
  a.open(ep.protocol(), ec);
  if (!ec) a.bind(ep, ec);
  if (ec == asio::error::address_in_use || ec == asio::error::access_denied)
    throw PortInUse("port " + std::to_string(port) + " is not available: " + ec.message());
  if (!ec) a.listen(asio::socket_base::max_listen_connections, ec);
  if (ec) throw IoError("cannot listen on port " + std::to_string(port) + ": " + ec.message());
  return a.local_endpoint().port();
}

void TeleopServer::run() {
  if (!impl_->acceptor.is_open()) throw ConfigError("TeleopServer::run before bind");
  impl_->accept();
  std::thread sim([this] { impl_->sim_loop(); });
  auto guard = asio::make_work_guard(impl_->io);
  impl_->io.run();
  impl_->stopping = true;
  impl_->stop_cv.notify_all();
  sim.join();
}

void TeleopServer::stop() {
  {
    std::lock_guard lk(impl_->stop_mu);
    impl_->stopping = true;
  }
  impl_->stop_cv.notify_all();
  asio::post(impl_->io, [this] {
    beast::error_code ec;
    impl_->acceptor.close(ec);
    if (impl_->conn) impl_->conn->close();
    impl_->io.stop();
  });
}

TeleopSession& TeleopServer::session() { return impl_->session; }

}  // namespace gazeneck::teleop
