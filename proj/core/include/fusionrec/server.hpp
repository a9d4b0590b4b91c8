#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "fusionrec/recall.hpp"
#include "json.hpp"

namespace fusionrec {

// Newline-delimited JSON over TCP, one thread per connection.
//   {"op":"health"}                            -> {"ok":true,"status":"up"}
//   {"op":"u2i","user":U,"k":K}                -> {"ok":true,"items":[{"item","score"}..]}
//   {"op":"u2i2i","user":U,"m":M,"k":K}        -> same shape
//   {"op":"item_neighbors","item":I,"k":K}     -> same shape
//   {"op":"user_embedding","user":U}           -> {"ok":true,"vector":[..]}
//   {"op":"item_embedding","item":I}           -> {"ok":true,"vector":[..]}
//   {"op":"rank_features","user":U,"item":I}   -> {"ok":true,"concat":[..],"dot":x}
// Failures answer {"ok":false,"error":"BAD_REQUEST"|"NOT_FOUND"}.
class RecallServer {
 public:
  explicit RecallServer(std::shared_ptr<const RecallService> service);
  ~RecallServer();

  RecallServer(const RecallServer&) = delete;
  RecallServer& operator=(const RecallServer&) = delete;

  // Replaces the stores; requests already running finish on the old ones.
  void swap(std::shared_ptr<const RecallService> service);
  std::shared_ptr<const RecallService> service() const;

  // One response line (without the newline) for one request line.
  std::string handle(const std::string& line) const;
  nlohmann::json handle(const nlohmann::json& request) const;

  // Binds and listens; port 0 picks an ephemeral port.
  void listen(const std::string& host, uint16_t port);
  uint16_t port() const { return port_; }
  // Accept loop on the calling thread until stop().
  void run();
  // Accept loop on a background thread.
  void start();
  void stop();

 private:
  void serve_connection(int fd);

  mutable std::mutex service_mutex_;
  std::shared_ptr<const RecallService> service_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex connections_mutex_;
  std::vector<std::thread> connections_;
  std::vector<int> open_fds_;
};

// "host:port" -> (host, port).
std::pair<std::string, uint16_t> parse_address(const std::string& address);

// Minimal blocking client for the line protocol.
class RecallClient {
 public:
  RecallClient(const std::string& host, uint16_t port);
  ~RecallClient();
  RecallClient(const RecallClient&) = delete;
  RecallClient& operator=(const RecallClient&) = delete;

  std::string request(const std::string& line);
  nlohmann::json request(const nlohmann::json& request);

 private:
  int fd_ = -1;
  std::string buffer_;
};

}  // namespace fusionrec
