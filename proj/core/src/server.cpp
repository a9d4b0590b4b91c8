#include "fusionrec/server.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "fusionrec/error.hpp"

namespace fusionrec {

using nlohmann::json;

namespace {

json error_response(const char* code) { return {{"ok", false}, {"error", code}}; }

struct BadRequest {};

const json& field(const json& request, const char* name) {
  if (!request.contains(name)) throw BadRequest{};
  return request.at(name);
}

std::string string_field(const json& request, const char* name) {
  const json& v = field(request, name);
  if (!v.is_string()) throw BadRequest{};
  return v.get<std::string>();
}

int64_t count_field(const json& request, const char* name) {
  const json& v = field(request, name);
  if (!v.is_number_integer()) throw BadRequest{};
  const auto n = v.get<int64_t>();
  if (n < 1) throw BadRequest{};
  return n;
}

json items_json(const std::vector<ScoredItem>& items) {
  json list = json::array();
  for (const auto& hit : items) list.push_back({{"item", hit.item}, {"score", hit.score}});
  return list;
}

void send_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) fail(ErrorKind::kIo, std::string("send failed: ") + std::strerror(errno));
    sent += static_cast<std::size_t>(n);
  }
}

}  // namespace

std::pair<std::string, uint16_t> parse_address(const std::string& address) {
  const auto colon = address.rfind(':');
  require(colon != std::string::npos, ErrorKind::kInvalidArgument,
          "address must be HOST:PORT, got " + address);
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  int value = -1;
  try {
    std::size_t used = 0;
    value = std::stoi(port, &used);
    if (used != port.size()) value = -1;
  } catch (const std::exception&) {
    value = -1;
  }
  require(value >= 0 && value <= 65535, ErrorKind::kInvalidArgument, "bad port in " + address);
  return {host.empty() ? "127.0.0.1" : host, static_cast<uint16_t>(value)};
}

RecallServer::RecallServer(std::shared_ptr<const RecallService> service)
    : service_(std::move(service)) {
  require(service_ != nullptr, ErrorKind::kInvalidArgument, "server needs a recall service");
}

RecallServer::~RecallServer() { stop(); }

void RecallServer::swap(std::shared_ptr<const RecallService> service) {
  require(service != nullptr, ErrorKind::kInvalidArgument, "server needs a recall service");
  std::lock_guard lock(service_mutex_);
  service_ = std::move(service);
}

std::shared_ptr<const RecallService> RecallServer::service() const {
  std::lock_guard lock(service_mutex_);
  return service_;
}

json RecallServer::handle(const json& request) const {
  const auto service = this->service();
  try {
    if (!request.is_object()) throw BadRequest{};
    const std::string op = string_field(request, "op");
    if (op == "health") return {{"ok", true}, {"status", "up"}};
    if (op == "u2i") {
      return {{"ok", true},
              {"items", items_json(service->u2i(string_field(request, "user"),
                                                count_field(request, "k")))}};
    }
    if (op == "u2i2i") {
      return {{"ok", true},
              {"items", items_json(service->u2i2i(string_field(request, "user"),
                                                  count_field(request, "m"),
                                                  count_field(request, "k")))}};
    }
    if (op == "item_neighbors") {
      return {{"ok", true},
              {"items", items_json(service->item_neighbors(string_field(request, "item"),
                                                           count_field(request, "k")))}};
    }
    if (op == "user_embedding") {
      const auto v = service->user_vector(string_field(request, "user"));
      return {{"ok", true}, {"vector", std::vector<float>(v.begin(), v.end())}};
    }
    if (op == "item_embedding") {
      const auto v = service->item_vector(string_field(request, "item"));
      return {{"ok", true}, {"vector", std::vector<float>(v.begin(), v.end())}};
    }
    if (op == "rank_features") {
      const auto f =
          service->rank_features(string_field(request, "user"), string_field(request, "item"));
      return {{"ok", true}, {"concat", f.concat}, {"dot", f.dot}};
    }
    return error_response("BAD_REQUEST");
  } catch (const BadRequest&) {
    return error_response("BAD_REQUEST");
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kNotFound) return error_response("NOT_FOUND");
    return error_response("BAD_REQUEST");
  } catch (const json::exception&) {
    return error_response("BAD_REQUEST");
  }
}

std::string RecallServer::handle(const std::string& line) const {
  json request;
  try {
    request = json::parse(line);
  } catch (const json::exception&) {
    return error_response("BAD_REQUEST").dump();
  }
  return handle(request).dump();
}

void RecallServer::listen(const std::string& host, uint16_t port) {
  require(listen_fd_ < 0, ErrorKind::kInvalidArgument, "server is already listening");
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* result = nullptr;
  const std::string service = std::to_string(port);
  const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &result);
  require(rc == 0, ErrorKind::kIo, "cannot resolve " + host + ": " + ::gai_strerror(rc));
  const int fd = ::socket(result->ai_family, result->ai_socktype, result->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(result);
    fail(ErrorKind::kIo, std::string("socket: ") + std::strerror(errno));
  }
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(fd, result->ai_addr, result->ai_addrlen) != 0 || ::listen(fd, 64) != 0) {
    const std::string reason = std::strerror(errno);
    ::freeaddrinfo(result);
    ::close(fd);
    fail(ErrorKind::kIo, "cannot listen on " + host + ":" + service + ": " + reason);
  }
  ::freeaddrinfo(result);
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  listen_fd_ = fd;
}

void RecallServer::run() {
  require(listen_fd_ >= 0, ErrorKind::kInvalidArgument, "call listen() before run()");
  while (!stopping_) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 100);
    if (ready <= 0) continue;
    const int client = ::accept(listen_fd_, nullptr, nullptr);
    if (client < 0) continue;
    const int one = 1;
    ::setsockopt(client, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    std::lock_guard lock(connections_mutex_);
    open_fds_.push_back(client);
    connections_.emplace_back([this, client] { serve_connection(client); });
  }
}

void RecallServer::start() {
  require(listen_fd_ >= 0, ErrorKind::kInvalidArgument, "call listen() before start()");
  accept_thread_ = std::thread([this] { run(); });
}

void RecallServer::stop() {
  stopping_ = true;
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(connections_mutex_);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
    threads.swap(connections_);
  }
  for (auto& t : threads) {
    if (t.joinable()) t.join();
  }
  if (listen_fd_ >= 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
}

void RecallServer::serve_connection(int fd) {
  std::string buffer;
  char chunk[4096];
  try {
    while (!stopping_) {
      const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t start = 0;
      std::string out;
      for (auto nl = buffer.find('\n', start); nl != std::string::npos;
           nl = buffer.find('\n', start)) {
        std::string line = buffer.substr(start, nl - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        start = nl + 1;
        if (line.empty()) continue;
        out += handle(line);
        out += '\n';
      }
      buffer.erase(0, start);
      if (!out.empty()) send_all(fd, out);
    }
  } catch (const std::exception&) {
    // peer went away
  }
  std::lock_guard lock(connections_mutex_);
  open_fds_.erase(std::remove(open_fds_.begin(), open_fds_.end(), fd), open_fds_.end());
  ::close(fd);
}

RecallClient::RecallClient(const std::string& host, uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* result = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &result);
  require(rc == 0, ErrorKind::kIo, "cannot resolve " + host + ": " + ::gai_strerror(rc));
  fd_ = ::socket(result->ai_family, result->ai_socktype, result->ai_protocol);
  const bool ok = fd_ >= 0 && ::connect(fd_, result->ai_addr, result->ai_addrlen) == 0;
  const std::string reason = std::strerror(errno);
  ::freeaddrinfo(result);
  if (!ok) {
    if (fd_ >= 0) ::close(fd_);
    fail(ErrorKind::kIo, "cannot connect to " + host + ":" + std::to_string(port) + ": " + reason);
  }
  const int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

RecallClient::~RecallClient() {
  if (fd_ >= 0) ::close(fd_);
}

std::string RecallClient::request(const std::string& line) {
  send_all(fd_, line + "\n");
  char chunk[4096];
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string response = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return response;
    }
    const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
    if (n < 0 && errno == EINTR) continue;
    require(n > 0, ErrorKind::kIo, "connection closed by server");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

json RecallClient::request(const json& request) { return json::parse(this->request(request.dump())); }

}  // namespace fusionrec
