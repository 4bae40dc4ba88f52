#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "uad/postproc.hpp"

namespace uad {

/// The refiner could not produce a usable answer; callers fall back.
struct RefinerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RefineRequest {
  std::int64_t id = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::span<const float> image;
  PromptSet prompts;
  /// Not sent over the wire; the built-in refiner scores against it.
  const Mask2D* initial = nullptr;
};

struct RefineResponse {
  Mask2D mask;
  double confidence = 0.0;
};

/// Prompted mask refinement. Implementations throw RefinerError on failure.
class RegionRefiner {
 public:
  virtual ~RegionRefiner() = default;
  virtual RefineResponse refine(const RefineRequest& request) = 0;
};

/// Region growing from the prompt points inside the bounding box. Confidence is
/// the IoU of the grown region against the initial mask clipped to the box.
class BuiltinRefiner final : public RegionRefiner {
 public:
  explicit BuiltinRefiner(double tolerance = 1.0) : tolerance_(tolerance) {}
  RefineResponse refine(const RefineRequest& request) override;

 private:
  double tolerance_;
};

Mask2D grow_region(std::span<const float> image, std::size_t height, std::size_t width, const PromptSet& prompts,
                   double tolerance);

/// Newline-delimited JSON codec of the refiner wire protocol.
std::string encode_request(const RefineRequest& request);
/// Throws RefinerError on anything malformed, a mismatched id, or a wrong mask size.
RefineResponse decode_response(const std::string& line, std::int64_t expected_id, std::size_t height,
                               std::size_t width);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws RefinerError on invalid input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Child process speaking the wire protocol on stdin/stdout. Calls are
/// serialized; a dead or stalled child turns every call into a RefinerError.
class ExternalRefiner final : public RegionRefiner {
 public:
  explicit ExternalRefiner(std::vector<std::string> argv,
                           std::chrono::milliseconds timeout = std::chrono::seconds(120));
  ~ExternalRefiner() override;
  ExternalRefiner(const ExternalRefiner&) = delete;
  ExternalRefiner& operator=(const ExternalRefiner&) = delete;

  RefineResponse refine(const RefineRequest& request) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Splits a command line on whitespace, honouring single and double quotes.
std::vector<std::string> split_command(const std::string& command);

}  // namespace uad
