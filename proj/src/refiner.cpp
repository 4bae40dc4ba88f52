#include <bit>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstring>
#include <mutex>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>
#include <openssl/evp.h>

#include "uad/refiner.hpp"

namespace uad {

using nlohmann::json;

Mask2D grow_region(std::span<const float> image, std::size_t height, std::size_t width, const PromptSet& prompts,
                   double tolerance) {
  Mask2D grown(height, width);
  const auto [x0, y0, x1, y1] = prompts.bbox;
  auto inside = [&](long x, long y) { return x >= x0 && x <= x1 && y >= y0 && y <= y1; };

  std::vector<std::size_t> queue;
  double sum = 0.0;
  for (const auto& pt : prompts.points) {
    if (!inside(pt.x, pt.y) || pt.x < 0 || pt.y < 0 || static_cast<std::size_t>(pt.x) >= width ||
        static_cast<std::size_t>(pt.y) >= height)
      continue;
    const std::size_t i = static_cast<std::size_t>(pt.y) * width + static_cast<std::size_t>(pt.x);
    if (grown.data[i]) continue;
    grown.data[i] = 1;
    queue.push_back(i);
    sum += image[i];
  }
  if (queue.empty()) return grown;

  double n = static_cast<double>(queue.size());
  static constexpr std::array<std::array<long, 2>, 4> kSteps{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const auto y = static_cast<long>(queue[head] / width);
    const auto x = static_cast<long>(queue[head] % width);
    for (const auto& [dy, dx] : kSteps) {
      const long ny = y + dy, nx = x + dx;
      if (!inside(nx, ny) || ny < 0 || nx < 0 || ny >= static_cast<long>(height) || nx >= static_cast<long>(width))
        continue;
      const std::size_t j = static_cast<std::size_t>(ny) * width + static_cast<std::size_t>(nx);
      if (grown.data[j] || std::abs(static_cast<double>(image[j]) - sum / n) > tolerance) continue;
      grown.data[j] = 1;
      queue.push_back(j);
      sum += image[j];
      n += 1.0;
    }
  }
  return grown;
}

RefineResponse BuiltinRefiner::refine(const RefineRequest& request) {
  if (request.image.size() != request.height * request.width)
    throw RefinerError("image holds " + std::to_string(request.image.size()) + " values, expected " +
                       std::to_string(request.height * request.width));
  RefineResponse out;
  out.mask = grow_region(request.image, request.height, request.width, request.prompts, tolerance_);
  if (request.initial == nullptr) {
    out.confidence = 0.0;
    return out;
  }
  const auto [x0, y0, x1, y1] = request.prompts.bbox;
  std::size_t inter = 0, uni = 0;
  for (std::size_t y = 0; y < request.height; ++y)
    for (std::size_t x = 0; x < request.width; ++x) {
      const bool boxed = static_cast<long>(x) >= x0 && static_cast<long>(x) <= x1 && static_cast<long>(y) >= y0 &&
                         static_cast<long>(y) <= y1;
      const bool a = out.mask.at(y, x) != 0;
      const bool b = boxed && request.initial->at(y, x) != 0;
      inter += a && b;
      uni += a || b;
    }
  out.confidence = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  return out;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw RefinerError("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(text.size() / 4 * 3);
  if (text.empty()) return out;
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw RefinerError("invalid base64 payload");
  std::size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() >= 2 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string encode_request(const RefineRequest& r) {
  std::vector<std::uint8_t> raw(r.image.size() * 4);
  for (std::size_t i = 0; i < r.image.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(r.image[i]);
    for (int b = 0; b < 4; ++b) raw[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  json points = json::array();
  for (const auto& p : r.prompts.points) points.push_back({p.x, p.y});
  const json j = {{"id", r.id},
                  {"h", r.height},
                  {"w", r.width},
                  {"image_b64", base64_encode(raw)},
                  {"bbox", r.prompts.bbox},
                  {"points", points}};
  return j.dump();
}

RefineResponse decode_response(const std::string& line, std::int64_t expected_id, std::size_t height,
                               std::size_t width) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw RefinerError(std::string("malformed refiner response: ") + e.what());
  }
  if (!j.is_object()) throw RefinerError("refiner response is not an object");
  if (j.contains("error")) throw RefinerError("refiner reported: " + j["error"].dump());
  if (!j.contains("id") || !j["id"].is_number_integer() || j["id"].get<std::int64_t>() != expected_id)
    throw RefinerError("refiner response id does not match request " + std::to_string(expected_id));
  if (!j.contains("mask_b64") || !j["mask_b64"].is_string() || !j.contains("confidence") ||
      !j["confidence"].is_number())
    throw RefinerError("refiner response lacks mask_b64 or confidence");
  RefineResponse out;
  out.confidence = j["confidence"].get<double>();
  if (!std::isfinite(out.confidence) || out.confidence < 0.0 || out.confidence > 1.0)
    throw RefinerError("refiner confidence outside [0,1]");
  auto bytes = base64_decode(j["mask_b64"].get<std::string>());
  if (bytes.size() != height * width)
    throw RefinerError("refiner mask holds " + std::to_string(bytes.size()) + " bytes, expected " +
                       std::to_string(height * width));
  out.mask = Mask2D(height, width);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] > 1) throw RefinerError("refiner mask contains values other than 0/1");
    out.mask.data[i] = bytes[i];
  }
  return out;
}

std::vector<std::string> split_command(const std::string& command) {
  std::vector<std::string> out;
  std::string cur;
  bool any = false;
  char quote = 0;
  for (char c : command) {
    if (quote) {
      if (c == quote)
        quote = 0;
      else
        cur += c;
    } else if (c == '\'' || c == '"') {
      quote = c;
      any = true;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      if (any || !cur.empty()) out.push_back(std::move(cur));
      cur.clear();
      any = false;
    } else {
      cur += c;
    }
  }
  if (quote) throw std::invalid_argument("unterminated quote in command '" + command + "'");
  if (any || !cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct ExternalRefiner::Impl {
  std::vector<std::string> argv;
  std::chrono::milliseconds timeout;
  pid_t pid = -1;
  int to_child = -1;
  int from_child = -1;
  std::string pending;
  bool broken = false;
  std::mutex mutex;

  void start() {
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0)
      throw RefinerError(std::string("pipe: ") + std::strerror(errno));
    std::vector<char*> args;
    for (auto& a : argv) args.push_back(a.data());
    args.push_back(nullptr);
    pid = fork();
    if (pid < 0) throw RefinerError(std::string("fork: ") + std::strerror(errno));
    if (pid == 0) {
      dup2(in_pipe[0], STDIN_FILENO);
      dup2(out_pipe[1], STDOUT_FILENO);
      close(in_pipe[0]);
      close(in_pipe[1]);
      close(out_pipe[0]);
      close(out_pipe[1]);
      execvp(args[0], args.data());
      _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    to_child = in_pipe[1];
    from_child = out_pipe[0];
    fcntl(to_child, F_SETFD, FD_CLOEXEC);
    fcntl(from_child, F_SETFD, FD_CLOEXEC);
  }

  void write_all(const std::string& data) {
    std::size_t done = 0;
    while (done < data.size()) {
      const ssize_t n = ::write(to_child, data.data() + done, data.size() - done);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw RefinerError(std::string("writing to refiner: ") + std::strerror(errno));
      done += static_cast<std::size_t>(n);
    }
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      const auto nl = pending.find('\n');
      if (nl != std::string::npos) {
        std::string line = pending.substr(0, nl);
        pending.erase(0, nl + 1);
        return line;
      }
      const auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()).count();
      if (left <= 0) throw RefinerError("refiner timed out");
      pollfd p{from_child, POLLIN, 0};
      const int r = poll(&p, 1, static_cast<int>(left));
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) throw RefinerError("refiner timed out");
      char buf[65536];
      const ssize_t n = ::read(from_child, buf, sizeof buf);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw RefinerError("refiner closed its output");
      pending.append(buf, static_cast<std::size_t>(n));
    }
  }

  void stop() {
    if (to_child >= 0) close(to_child);
    if (from_child >= 0) close(from_child);
    to_child = from_child = -1;
    if (pid > 0) {
      int status = 0;
      for (int i = 0; i < 50; ++i) {
        if (waitpid(pid, &status, WNOHANG) == pid) {
          pid = -1;
          return;
        }
        usleep(20000);
      }
      kill(pid, SIGKILL);
      waitpid(pid, &status, 0);
      pid = -1;
    }
  }
};

ExternalRefiner::ExternalRefiner(std::vector<std::string> argv, std::chrono::milliseconds timeout)
    : impl_(std::make_unique<Impl>()) {
  if (argv.empty()) throw std::invalid_argument("external refiner needs a command");
  std::signal(SIGPIPE, SIG_IGN);
  impl_->argv = std::move(argv);
  impl_->timeout = timeout;
  impl_->start();
}

ExternalRefiner::~ExternalRefiner() { impl_->stop(); }

RefineResponse ExternalRefiner::refine(const RefineRequest& request) {
  std::lock_guard lock(impl_->mutex);
  if (impl_->broken) throw RefinerError("refiner process is no longer usable");
  std::string line;
  try {
    impl_->write_all(encode_request(request) + "\n");
    line = impl_->read_line();
  } catch (const RefinerError&) {
    impl_->broken = true;
    throw;
  }
  return decode_response(line, request.id, request.height, request.width);
}

}  // namespace uad
