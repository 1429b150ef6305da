#pragma once

// Shared fixtures: programmatic banks and pools, scratch directories and a
// local fake chat-completion server.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <thread>

#include <unistd.h>

// Eigen must precede httplib: <resolv.h> defines a macro named _res.
#include <profilebench/profilebench.hpp>
#include <httplib.h>

namespace testing_support {

namespace pb = profilebench;
namespace fs = std::filesystem;

#ifndef PROFILEBENCH_SOURCE_DIR
#define PROFILEBENCH_SOURCE_DIR "."
#endif

inline fs::path source_dir() { return fs::path(PROFILEBENCH_SOURCE_DIR); }
inline fs::path data_dir() { return source_dir() / "data"; }

/// Bank JSON with `per_skill[i]` items for skill i; skill ids are S<grade>.<i+1>.
inline pb::json bank_json(int grade, const std::vector<std::size_t>& per_skill) {
  pb::json skills = pb::json::array(), items = pb::json::array();
  for (std::size_t s = 0; s < per_skill.size(); ++s) {
    const std::string sid = "S" + std::to_string(grade) + "." + std::to_string(s + 1);
    skills.push_back({{"id", sid}, {"name", "Skill family " + std::to_string(s + 1)}});
    for (std::size_t n = 0; n < per_skill[s]; ++n) {
      const int a = static_cast<int>(s * 1000 + n + 11);
      items.push_back({{"id", "g" + std::to_string(grade) + "-" + sid + "-" + std::to_string(n)},
                       {"skill", sid},
                       {"stem", "Skill " + sid + " question " + std::to_string(n) + ": compute " + std::to_string(a) +
                                    " + " + std::to_string(n + 3) + "."},
                       {"options",
                        {std::to_string(a + static_cast<int>(n) + 3), std::to_string(a + static_cast<int>(n) + 4),
                         std::to_string(a + static_cast<int>(n) + 2), std::to_string(a + static_cast<int>(n) + 13)}},
                       {"answer_index", static_cast<int>(n % 4)}});
    }
  }
  return {{"grade", grade}, {"skills", skills}, {"items", items}};
}

inline pb::ItemBank make_bank(int grade, const std::vector<std::size_t>& per_skill) {
  return pb::parse_item_bank(bank_json(grade, per_skill));
}

inline pb::json pool_json(const pb::ItemBank& bank) {
  pb::json pool = pb::json::array();
  for (const auto& s : bank.taxonomy())
    pool.push_back({{"skill", s.id},
                    {"correct_demo", "Practice for " + s.id + ": 2 + 2 = ? Student answer: 4"},
                    {"incorrect_demo", "Practice for " + s.id + ": 2 + 2 = ? Student answer: 5"}});
  return pool;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("profilebench-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

inline pb::BackendConfig synthetic_backend(std::string id, std::uint64_t seed, double p_retain = 0.9,
                                           double p_forget = 0.25) {
  pb::BackendConfig c;
  c.backend_id = std::move(id);
  c.kind = pb::BackendKind::Synthetic;
  c.synthetic.seed = seed;
  c.synthetic.p_retain = p_retain;
  c.synthetic.p_forget = p_forget;
  return c;
}

/// Minimal OpenAI-compatible endpoint on 127.0.0.1 with a scripted handler.
class FakeChatServer {
 public:
  struct Reply {
    int status = 200;
    std::string content = "A";
    std::chrono::milliseconds delay{0};
  };
  using Handler = std::function<Reply(const pb::json& request, std::size_t call_index)>;

  explicit FakeChatServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const std::size_t index = calls_++;
      last_auth_ = req.get_header_value("Authorization");
      pb::json body = pb::json::parse(req.body);
      last_request_ = body;
      const Reply r = handler_(body, index);
      if (r.delay.count() > 0) std::this_thread::sleep_for(r.delay);
      res.status = r.status;
      if (r.status == 200) {
        const pb::json reply = {{"id", "cmpl-test"},
                                {"object", "chat.completion"},
                                {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", r.content}}}}}}};
        res.set_content(reply.dump(), "application/json");
      } else {
        res.set_content(R"({"error":{"message":"scripted failure"}})", "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeChatServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::size_t calls() const { return calls_.load(); }
  pb::json last_request() const { return last_request_; }
  std::string last_auth() const { return last_auth_; }

 private:
  Handler handler_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> calls_{0};
  pb::json last_request_;
  std::string last_auth_;
};

inline pb::BackendConfig remote_backend(std::string id, const std::string& endpoint, const std::string& key_env) {
  pb::BackendConfig c;
  c.backend_id = std::move(id);
  c.kind = pb::BackendKind::Remote;
  c.remote.endpoint = endpoint;
  c.remote.model = "test-model";
  c.remote.api_key_env = key_env;
  c.remote.max_retries = 2;
  c.remote.requests_per_minute = 60000;
  c.remote.timeout_seconds = 2.0;
  c.remote.backoff_initial_seconds = 0.001;
  c.remote.backoff_max_seconds = 0.01;
  return c;
}

}  // namespace testing_support

#define EXPECT_PB_ERROR(statement, error_code)                                     \
  do {                                                                             \
    try {                                                                          \
      statement;                                                                   \
      ADD_FAILURE() << "expected " << ::profilebench::error_code_name(error_code); \
    } catch (const ::profilebench::Error& e_) {                                    \
      EXPECT_EQ(e_.code(), error_code) << e_.what();                               \
    }                                                                              \
  } while (0)
