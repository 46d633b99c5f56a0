#pragma once

// Roadside-to-vehicle link: bandwidth model, resampling, the wire frame codec,
// two transports and the cooperative inference flow.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>
#include <zlib.h>

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "v2xvlm/error.hpp"
#include "v2xvlm/model.hpp"
#include "v2xvlm/planner.hpp"
#include "v2xvlm/scenario.hpp"
#include "v2xvlm/types.hpp"

namespace v2x {

struct LinkConfig {
  std::uint64_t width = 1920;
  std::uint64_t height = 1080;
  std::uint64_t channels = 3;
  double freq = 2.0;  // frames per second
  double scale = 1.0;

  void validate() const {
    if (width == 0 || height == 0 || channels == 0 || !(freq > 0.0))
      fail(Errc::invalid_config, "link dimensions and frequency must be positive");
    if (!(scale > 0.0 && scale <= 1.0)) fail(Errc::invalid_config, "scale must lie in (0, 1]");
  }
};

// Bytes per second: s^2 * W * H * C * f, rounded.
inline std::uint64_t bps(const LinkConfig& c) {
  c.validate();
  const double v = c.scale * c.scale * static_cast<double>(c.width) * static_cast<double>(c.height) *
                   static_cast<double>(c.channels) * c.freq;
  return static_cast<std::uint64_t>(std::llround(v));
}

// "1.24e7" style, three significant figures.
inline std::string sci3(double v) {
  if (v == 0.0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  std::string s(buf);
  const auto e = s.find('e');
  std::string mant = s.substr(0, e);
  int exp = std::stoi(s.substr(e + 1));
  return mant + "e" + std::to_string(exp);
}

inline std::size_t scaled_dim(std::size_t n, double s) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * s + 1e-9));
}

namespace detail {

// Overlap weights of output cells of size n_in/n_out with input cells.
struct AreaTap {
  std::size_t first = 0;
  std::vector<double> w;
};

inline std::vector<AreaTap> area_taps(std::size_t n_in, std::size_t n_out) {
  std::vector<AreaTap> taps(n_out);
  const double f = static_cast<double>(n_in) / static_cast<double>(n_out);
  for (std::size_t o = 0; o < n_out; ++o) {
    const double lo = static_cast<double>(o) * f;
    const double hi = static_cast<double>(o + 1) * f;
    const auto i0 = static_cast<std::size_t>(std::floor(lo));
    const auto i1 = std::min(n_in, static_cast<std::size_t>(std::ceil(hi - 1e-12)));
    taps[o].first = i0;
    for (std::size_t i = i0; i < i1; ++i) {
      const double a = std::max(lo, static_cast<double>(i));
      const double b = std::min(hi, static_cast<double>(i + 1));
      taps[o].w.push_back(std::max(0.0, b - a) / f);
    }
  }
  return taps;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

// Area-average resampling to (floor(sH), floor(sW)).
inline Image downsample(const Image& img, double s) {
  if (!(s > 0.0 && s <= 1.0)) fail(Errc::invalid_config, "scale must lie in (0, 1]");
  if (img.height == 0 || img.width == 0) fail(Errc::degenerate_dimensions, "empty image");
  if (s == 1.0) return img;
  const std::size_t oh = scaled_dim(img.height, s);
  const std::size_t ow = scaled_dim(img.width, s);
  if (oh == 0 || ow == 0) fail(Errc::degenerate_dimensions, "downsampled image would be empty");
  const auto ty = detail::area_taps(img.height, oh);
  const auto tx = detail::area_taps(img.width, ow);
  const std::size_t C = img.channels;

  std::vector<double> rows(oh * img.width * C, 0.0);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t k = 0; k < ty[r].w.size(); ++k) {
      const std::size_t sr = ty[r].first + k;
      const double w = ty[r].w[k];
      for (std::size_t i = 0; i < img.width * C; ++i) rows[r * img.width * C + i] += w * img.data[sr * img.width * C + i];
    }
  Image out(oh, ow, C);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (std::size_t ch = 0; ch < C; ++ch) {
        double acc = 0.0;
        for (std::size_t k = 0; k < tx[c].w.size(); ++k)
          acc += tx[c].w[k] * rows[(r * img.width + tx[c].first + k) * C + ch];
        out.at(r, c, ch) = detail::to_byte(acc);
      }
  return out;
}

// Bilinear resampling with half-pixel centres and edge clamping.
inline Image upsample(const Image& img, std::size_t height, std::size_t width) {
  if (img.height == 0 || img.width == 0 || height == 0 || width == 0)
    fail(Errc::degenerate_dimensions, "empty image or target");
  if (img.height == height && img.width == width) return img;
  auto coord = [](std::size_t o, std::size_t n_in, std::size_t n_out) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, n_in - 1);
    return std::tuple{i0, i1, src - static_cast<double>(i0)};
  };
  Image out(height, width, img.channels);
  for (std::size_t r = 0; r < height; ++r) {
    const auto [r0, r1, fy] = coord(r, img.height, height);
    for (std::size_t c = 0; c < width; ++c) {
      const auto [c0, c1, fx] = coord(c, img.width, width);
      for (std::size_t ch = 0; ch < img.channels; ++ch) {
        const double top = (1.0 - fx) * img.at(r0, c0, ch) + fx * img.at(r0, c1, ch);
        const double bot = (1.0 - fx) * img.at(r1, c0, ch) + fx * img.at(r1, c1, ch);
        out.at(r, c, ch) = detail::to_byte((1.0 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wire frame
//
//   off  size  field
//     0     4  magic "V2XF"
//     4     1  version (1)
//     5     8  frame_id
//    13     8  timestamp_us
//    21     2  scale_milli (s * 1000)
//    23     2  width
//    25     2  height
//    27     1  channels
//    28     4  payload_len = width * height * channels
//    32     n  payload, row-major interleaved bytes
//  32+n     4  crc32 of the payload
//
// All integers little-endian.

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kWireHeaderSize = 32;

struct FrameMeta {
  std::uint64_t frame_id = 0;
  std::uint64_t timestamp_us = 0;
  std::uint16_t scale_milli = 1000;

  friend bool operator==(const FrameMeta&, const FrameMeta&) = default;
};

struct DecodedFrame {
  Image image;
  FrameMeta meta;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

namespace wire {

inline void put(std::vector<std::uint8_t>& b, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace wire

inline std::uint16_t scale_to_milli(double s) { return static_cast<std::uint16_t>(std::lround(s * 1000.0)); }

inline std::vector<std::uint8_t> encode_frame(const Image& img, const FrameMeta& meta) {
  if (img.width > 0xFFFF || img.height > 0xFFFF || img.channels > 0xFF)
    fail(Errc::invalid_config, "image dimensions exceed header fields");
  if (img.data.size() != img.width * img.height * img.channels)
    fail(Errc::shape_mismatch, "image buffer does not match its dimensions");
  std::vector<std::uint8_t> b;
  b.reserve(kWireHeaderSize + img.data.size() + 4);
  b.insert(b.end(), {'V', '2', 'X', 'F'});
  b.push_back(kWireVersion);
  wire::put(b, meta.frame_id, 8);
  wire::put(b, meta.timestamp_us, 8);
  wire::put(b, meta.scale_milli, 2);
  wire::put(b, img.width, 2);
  wire::put(b, img.height, 2);
  wire::put(b, img.channels, 1);
  wire::put(b, img.data.size(), 4);
  b.insert(b.end(), img.data.begin(), img.data.end());
  wire::put(b, crc32_of(img.data.data(), img.data.size()), 4);
  return b;
}

inline DecodedFrame decode_frame(const std::vector<std::uint8_t>& b) {
  if (b.size() < 5) fail(Errc::truncated_frame, "frame shorter than its header");
  if (!(b[0] == 'V' && b[1] == '2' && b[2] == 'X' && b[3] == 'F')) fail(Errc::bad_magic, "frame magic is not V2XF");
  if (b[4] != kWireVersion) fail(Errc::unsupported_version, "frame version " + std::to_string(b[4]));
  if (b.size() < kWireHeaderSize) fail(Errc::truncated_frame, "frame shorter than its header");
  const std::uint8_t* p = b.data();
  DecodedFrame f;
  f.meta.frame_id = wire::get(p + 5, 8);
  f.meta.timestamp_us = wire::get(p + 13, 8);
  f.meta.scale_milli = static_cast<std::uint16_t>(wire::get(p + 21, 2));
  const auto w = static_cast<std::size_t>(wire::get(p + 23, 2));
  const auto h = static_cast<std::size_t>(wire::get(p + 25, 2));
  const auto c = static_cast<std::size_t>(wire::get(p + 27, 1));
  const auto len = static_cast<std::size_t>(wire::get(p + 28, 4));
  if (len != w * h * c) fail(Errc::truncated_frame, "payload_len disagrees with the image dimensions");
  if (b.size() != kWireHeaderSize + len + 4) fail(Errc::truncated_frame, "frame size disagrees with payload_len");
  const std::uint32_t crc = static_cast<std::uint32_t>(wire::get(p + kWireHeaderSize + len, 4));
  if (crc != crc32_of(p + kWireHeaderSize, len)) fail(Errc::crc_mismatch, "payload checksum mismatch");
  f.image = Image(h, w, c);
  std::copy(p + kWireHeaderSize, p + kWireHeaderSize + len, f.image.data.begin());
  return f;
}

// ---------------------------------------------------------------------------
// Transports

using Message = std::vector<std::uint8_t>;

class ByteChannel {
 public:
  virtual ~ByteChannel() = default;
  virtual void send(const Message& m) = 0;
  // Empty when nothing arrives before the timeout.
  virtual std::optional<Message> recv(std::chrono::milliseconds timeout) = 0;
};

// One direction of an in-process queue.
class QueueChannel final : public ByteChannel {
 public:
  void send(const Message& m) override {
    {
      std::lock_guard lk(mu_);
      q_.push_back(m);
    }
    cv_.notify_one();
  }

  std::optional<Message> recv(std::chrono::milliseconds timeout) override {
    std::unique_lock lk(mu_);
    if (!cv_.wait_for(lk, timeout, [&] { return !q_.empty(); })) return std::nullopt;
    Message m = std::move(q_.front());
    q_.pop_front();
    return m;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Message> q_;
};

// Loopback TCP stream carrying u32-length-prefixed messages.
class TcpChannel final : public ByteChannel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpChannel() override {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;

  static std::unique_ptr<TcpChannel> connect(std::uint16_t port, std::chrono::milliseconds timeout) {
    const auto until = std::chrono::steady_clock::now() + timeout;
    while (true) {
      int fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd < 0) fail(Errc::io_error, "socket() failed");
      sockaddr_in a{};
      a.sin_family = AF_INET;
      a.sin_port = htons(port);
      a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
      if (::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof a) == 0) return std::make_unique<TcpChannel>(fd);
      ::close(fd);
      if (std::chrono::steady_clock::now() >= until) fail(Errc::peer_timeout, "could not reach the peer");
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }

  void send(const Message& m) override {
    std::vector<std::uint8_t> buf;
    wire::put(buf, m.size(), 4);
    buf.insert(buf.end(), m.begin(), m.end());
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t n = ::send(fd_, buf.data() + off, buf.size() - off, MSG_NOSIGNAL);
      if (n <= 0) fail(Errc::io_error, "socket send failed");
      off += static_cast<std::size_t>(n);
    }
  }

  std::optional<Message> recv(std::chrono::milliseconds timeout) override {
    const auto until = std::chrono::steady_clock::now() + timeout;
    std::uint8_t hdr[4];
    if (!read_exact(hdr, 4, until)) return std::nullopt;
    Message m(static_cast<std::size_t>(wire::get(hdr, 4)));
    if (!read_exact(m.data(), m.size(), until)) fail(Errc::peer_timeout, "message cut off by the deadline");
    return m;
  }

 private:
  bool read_exact(std::uint8_t* p, std::size_t n, std::chrono::steady_clock::time_point until) {
    std::size_t got = 0;
    while (got < n) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(until - std::chrono::steady_clock::now());
      if (left.count() <= 0) return false;
      pollfd pfd{fd_, POLLIN, 0};
      const int r = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (r == 0) return false;
      if (r < 0) fail(Errc::io_error, "poll failed");
      const ssize_t k = ::recv(fd_, p + got, n - got, 0);
      if (k <= 0) fail(Errc::io_error, "peer closed the connection");
      got += static_cast<std::size_t>(k);
    }
    return true;
  }

  int fd_ = -1;
};

// Listening socket bound to 127.0.0.1. Port 0 picks a free port.
class TcpListener {
 public:
  explicit TcpListener(std::uint16_t port = 0) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(Errc::io_error, "socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(port);
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0 || ::listen(fd_, 1) != 0) {
      ::close(fd_);
      fail(Errc::io_error, "cannot listen on port " + std::to_string(port));
    }
    socklen_t len = sizeof a;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&a), &len);
    port_ = ntohs(a.sin_port);
  }
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }

  std::unique_ptr<TcpChannel> accept(std::chrono::milliseconds timeout) {
    pollfd pfd{fd_, POLLIN, 0};
    const int r = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (r == 0) fail(Errc::peer_timeout, "no peer connected before the deadline");
    if (r < 0) fail(Errc::io_error, "poll failed");
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0) fail(Errc::io_error, "accept failed");
    return std::make_unique<TcpChannel>(c);
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

// ---------------------------------------------------------------------------
// Cooperative inference

struct VehicleEndpoint {
  Image camera;
  Scene perceived;  // what the on-board describer reports about the camera view
};

struct RoadsideEndpoint {
  Image camera;
};

struct CoopOptions {
  double scale = 1.0;
  double noise_std = 0.0;  // roadside-side Gaussian noise, before encoding
  std::uint64_t noise_seed = 0;
  double text_flip_prob = 0.0;
  std::uint64_t text_seed = 0;
  PromptMode prompt_mode = PromptMode::full;
  bool blank_infra = false;  // nothing is transmitted; the vehicle uses a black raster
  std::chrono::milliseconds deadline{5000};
  std::uint64_t frame_id = 0;
  std::uint64_t timestamp_us = 0;
};

struct CoopResult {
  Plan plan;
  ScenePrompt prompt;
  Image infra_received;  // after upsampling
  std::size_t payload_bytes = 0;
  std::size_t frame_bytes = 0;
};

// Vehicle side, step one: scene text from the vehicle's own perception.
inline ScenePrompt describe_scene(const VehicleEndpoint& v, const CoopOptions& o) {
  ScenePrompt p = build_prompt(v.perceived);
  if (o.text_flip_prob > 0.0) p = perturb_text(p, o.text_flip_prob, o.text_seed);
  return p;
}

// Roadside image as it leaves the roadside unit, before encoding.
inline Image roadside_prepare(const RoadsideEndpoint& r, const CoopOptions& o) {
  Image img = o.noise_std > 0.0 ? perturb_image(r.camera, o.noise_std, o.noise_seed) : r.camera;
  return downsample(img, o.scale);
}

// Roadside side: optional noise, downsampling, encoding, sending.
inline void roadside_task(ByteChannel& out, const RoadsideEndpoint& r, const CoopOptions& o) {
  const Image img = roadside_prepare(r, o);
  out.send(encode_frame(img, {o.frame_id, o.timestamp_us, scale_to_milli(o.scale)}));
}

inline Plan plan_on(const Model& model, const Image& vehicle, const Image& infra, const ScenePrompt& prompt,
                    PromptMode mode) {
  return plan(model, vehicle, infra, prompt_tokens(prompt, mode));
}

// Vehicle side: describe, wait for the roadside frame, decode, upsample, plan.
inline CoopResult vehicle_task(const Model& model, const VehicleEndpoint& v, ByteChannel& in, const CoopOptions& o) {
  CoopResult res;
  res.prompt = describe_scene(v, o);
  if (o.blank_infra) {
    res.infra_received = blank_like(v.camera);
  } else {
    auto msg = in.recv(o.deadline);
    if (!msg) fail(Errc::peer_timeout, "roadside frame did not arrive before the deadline");
    DecodedFrame f;
    try {
      f = decode_frame(*msg);
    } catch (const Error& e) {
      fail(Errc::decode_failure, std::string(errc_name(e.code())) + ": " + e.what());
    }
    res.frame_bytes = msg->size();
    res.payload_bytes = f.image.byte_size();
    res.infra_received = upsample(f.image, v.camera.height, kViewWidth);
  }
  res.plan = plan_on(model, v.camera, res.infra_received, res.prompt, o.prompt_mode);
  return res;
}

// Both tasks over an in-process channel; the roadside runs on its own thread.
inline CoopResult cooperative_infer(const Model& model, const VehicleEndpoint& v, const RoadsideEndpoint& r,
                                    const CoopOptions& o = {}) {
  QueueChannel link;
  std::exception_ptr roadside_error;
  std::thread roadside;
  if (!o.blank_infra) {
    roadside = std::thread([&] {
      try {
        roadside_task(link, r, o);
      } catch (...) {
        roadside_error = std::current_exception();
      }
    });
  }
  CoopResult res;
  std::exception_ptr vehicle_error;
  try {
    res = vehicle_task(model, v, link, o);
  } catch (...) {
    vehicle_error = std::current_exception();
  }
  if (roadside.joinable()) roadside.join();
  if (roadside_error) std::rethrow_exception(roadside_error);
  if (vehicle_error) std::rethrow_exception(vehicle_error);
  return res;
}

// Same steps in one thread without a transport or codec.
inline CoopResult sequential_infer(const Model& model, const VehicleEndpoint& v, const RoadsideEndpoint& r,
                                   const CoopOptions& o = {}) {
  CoopResult res;
  res.prompt = describe_scene(v, o);
  if (o.blank_infra) {
    res.infra_received = blank_like(v.camera);
  } else {
    const Image sent = roadside_prepare(r, o);
    res.payload_bytes = sent.byte_size();
    res.frame_bytes = kWireHeaderSize + sent.byte_size() + 4;
    res.infra_received = upsample(sent, v.camera.height, kViewWidth);
  }
  res.plan = plan_on(model, v.camera, res.infra_received, res.prompt, o.prompt_mode);
  return res;
}

inline VehicleEndpoint vehicle_endpoint(const SceneSample& s) { return {s.vehicle, s.scene}; }
inline RoadsideEndpoint roadside_endpoint(const SceneSample& s) { return {s.infra}; }

}  // namespace v2x
