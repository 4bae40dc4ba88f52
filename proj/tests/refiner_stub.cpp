// Scripted child process for the refiner wire protocol.
//
//   refiner_stub box [CONF]     fill the prompt bbox, reply with CONF (default 1)
//   refiner_stub record FILE    as `box 1`, appending every request line to FILE
//   refiner_stub malformed      reply with a line that is not JSON
//   refiner_stub wrong-id       reply with id + 1
//   refiner_stub error-once     first reply is {"error": ...}, then `box 1`
//   refiner_stub die            exit on the first request without replying
//   refiner_stub hang           read requests and never reply

#include <chrono>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include <json.hpp>

#include "uad/refiner.hpp"

using nlohmann::json;

namespace {

json box_reply(const json& req, double confidence) {
  const std::size_t h = req.at("h"), w = req.at("w");
  const auto bbox = req.at("bbox").get<std::vector<int>>();
  std::vector<std::uint8_t> mask(h * w, 0);
  for (int y = bbox[1]; y <= bbox[3]; ++y)
    for (int x = bbox[0]; x <= bbox[2]; ++x) mask[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = 1;
  return {{"id", req.at("id")}, {"mask_b64", uad::base64_encode(mask)}, {"confidence", confidence}};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "box";
  const std::string arg = argc > 2 ? argv[2] : "";
  std::string line;
  int count = 0;
  while (std::getline(std::cin, line)) {
    ++count;
    const json req = json::parse(line);
    json reply;
    if (mode == "box") {
      reply = box_reply(req, arg.empty() ? 1.0 : std::stod(arg));
    } else if (mode == "record") {
      std::ofstream(arg, std::ios::app) << line << "\n";
      reply = box_reply(req, 1.0);
    } else if (mode == "malformed") {
      std::cout << "this is not json" << std::endl;
      continue;
    } else if (mode == "wrong-id") {
      reply = box_reply(req, 1.0);
      reply["id"] = req.at("id").get<std::int64_t>() + 1;
    } else if (mode == "error-once") {
      reply = count == 1 ? json{{"id", req.at("id")}, {"error", "model not ready"}} : box_reply(req, 1.0);
    } else if (mode == "die") {
      return 3;
    } else if (mode == "hang") {
      std::this_thread::sleep_for(std::chrono::hours(1));
    } else {
      std::cerr << "unknown mode " << mode << "\n";
      return 2;
    }
    std::cout << reply.dump() << std::endl;
  }
  return 0;
}
