#include <gtest/gtest.h>

#include <thread>

#include "fusionrec/server.hpp"

using namespace fusionrec;
using nlohmann::json;

namespace {

std::shared_ptr<const RecallService> make_service(float scale = 1.0f) {
  EmbeddingStore items(EmbeddingKind::kItem, 2);
  items.add("a", std::vector<float>{1 * scale, 0});
  items.add("b", std::vector<float>{0.8f, 0.2f});
  items.add("c", std::vector<float>{0, 1});
  items.add("d", std::vector<float>{-1, 0.1f});
  EmbeddingStore users(EmbeddingKind::kUser, 2);
  users.add("u1", std::vector<float>{1, 0});
  users.add("u2", std::vector<float>{0, 2});
  SimilarityIndex index = SimilarityIndex::build(items);
  Exclusions ex = {{"u1", {"a"}}, {"u2", {"c", "b"}}};
  return std::make_shared<const RecallService>(std::move(users), std::move(items), std::move(index),
                                               std::move(ex));
}

}  // namespace

TEST(Protocol, Health) {
  RecallServer server(make_service());
  EXPECT_EQ(json::parse(server.handle(std::string(R"({"op":"health"})"))),
            (json{{"ok", true}, {"status", "up"}}));
}

TEST(Protocol, RecallOpsMatchService) {
  const auto service = make_service();
  RecallServer server(service);
  const json u2i = server.handle(json{{"op", "u2i"}, {"user", "u1"}, {"k", 2}});
  ASSERT_TRUE(u2i.at("ok").get<bool>());
  const auto direct = service->u2i("u1", 2);
  ASSERT_EQ(u2i.at("items").size(), direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    EXPECT_EQ(u2i["items"][i]["item"], direct[i].item);
    EXPECT_EQ(u2i["items"][i]["score"].get<double>(), direct[i].score);
  }
  const json u2i2i = server.handle(json{{"op", "u2i2i"}, {"user", "u2"}, {"m", 2}, {"k", 5}});
  ASSERT_TRUE(u2i2i.at("ok").get<bool>());
  EXPECT_EQ(u2i2i.at("items").size(), service->u2i2i("u2", 2, 5).size());
  const json nb = server.handle(json{{"op", "item_neighbors"}, {"item", "a"}, {"k", 1}});
  EXPECT_EQ(nb["items"][0]["item"], "b");
  const json ue = server.handle(json{{"op", "user_embedding"}, {"user", "u2"}});
  EXPECT_EQ(ue["vector"], (json{0.0, 2.0}));
  const json ie = server.handle(json{{"op", "item_embedding"}, {"item", "c"}});
  EXPECT_EQ(ie["vector"], (json{0.0, 1.0}));
  const json rf = server.handle(json{{"op", "rank_features"}, {"user", "u2"}, {"item", "c"}});
  EXPECT_EQ(rf["concat"], (json{0.0, 2.0, 0.0, 1.0}));
  EXPECT_DOUBLE_EQ(rf["dot"].get<double>(), 2.0);
}

TEST(Protocol, ErrorCodes) {
  RecallServer server(make_service());
  const json bad = {{"ok", false}, {"error", "BAD_REQUEST"}};
  const json missing = {{"ok", false}, {"error", "NOT_FOUND"}};
  EXPECT_EQ(json::parse(server.handle(std::string("{nope"))), bad);
  EXPECT_EQ(json::parse(server.handle(std::string("[1,2]"))), bad);
  EXPECT_EQ(server.handle(json{{"op", "teleport"}}), bad);
  EXPECT_EQ(server.handle(json{{"user", "u1"}}), bad);
  EXPECT_EQ(server.handle(json{{"op", "u2i"}, {"user", "u1"}}), bad);
  EXPECT_EQ(server.handle(json{{"op", "u2i"}, {"user", "u1"}, {"k", 0}}), bad);
  EXPECT_EQ(server.handle(json{{"op", "u2i"}, {"user", "u1"}, {"k", "3"}}), bad);
  EXPECT_EQ(server.handle(json{{"op", "u2i"}, {"user", 7}, {"k", 3}}), bad);
  EXPECT_EQ(server.handle(json{{"op", "u2i"}, {"user", "ghost"}, {"k", 3}}), missing);
  EXPECT_EQ(server.handle(json{{"op", "item_embedding"}, {"item", "zz"}}), missing);
  EXPECT_EQ(server.handle(json{{"op", "u2i2i"}, {"user", "ghost"}, {"m", 1}, {"k", 1}}), missing);
}

TEST(Protocol, ParseAddress) {
  EXPECT_EQ(parse_address("127.0.0.1:8080"), (std::pair<std::string, uint16_t>{"127.0.0.1", 8080}));
  EXPECT_EQ(parse_address(":0").first, "127.0.0.1");
  EXPECT_THROW(parse_address("localhost"), Error);
  EXPECT_THROW(parse_address("h:70000"), Error);
  EXPECT_THROW(parse_address("h:12x"), Error);
}

TEST(Tcp, MalformedLineKeepsConnection) {
  RecallServer server(make_service());
  server.listen("127.0.0.1", 0);
  server.start();
  {
    RecallClient client("127.0.0.1", server.port());
    EXPECT_EQ(json::parse(client.request(std::string("this is not json"))).at("error"), "BAD_REQUEST");
    EXPECT_EQ(client.request(json{{"op", "health"}}).at("status"), "up");
    EXPECT_EQ(client.request(json{{"op", "u2i"}, {"user", "ghost"}, {"k", 1}}).at("error"), "NOT_FOUND");
    const json hit = client.request(json{{"op", "u2i"}, {"user", "u1"}, {"k", 1}});
    EXPECT_EQ(hit["items"][0]["item"], "b");
  }
  server.stop();
}

TEST(Tcp, PipelinedRequestsAnsweredInOrder) {
  RecallServer server(make_service());
  server.listen("127.0.0.1", 0);
  server.start();
  {
    RecallClient client("127.0.0.1", server.port());
    // Three lines in one write; the client reads the replies one at a time.
    const std::string first = client.request(std::string(
        "{\"op\":\"health\"}\n{\"op\":\"item_embedding\",\"item\":\"a\"}\n{\"op\":\"bogus\"}"));
    EXPECT_EQ(json::parse(first).at("status"), "up");
    // Each further request reads the next queued reply.
    EXPECT_EQ(client.request(json{{"op", "health"}}).at("vector"), (json{1.0, 0.0}));
    EXPECT_EQ(client.request(json{{"op", "health"}}).at("error"), "BAD_REQUEST");
    EXPECT_EQ(client.request(json{{"op", "health"}}).at("status"), "up");
  }
  server.stop();
}

TEST(Tcp, ConcurrentClientsAndSwap) {
  RecallServer server(make_service());
  server.listen("127.0.0.1", 0);
  server.start();
  std::vector<std::thread> workers;
  std::atomic<int> failures{0};
  for (int t = 0; t < 4; ++t) {
    workers.emplace_back([&] {
      RecallClient client("127.0.0.1", server.port());
      for (int i = 0; i < 50; ++i) {
        const json r = client.request(json{{"op", "item_neighbors"}, {"item", "c"}, {"k", 2}});
        if (!r.at("ok").get<bool>() || r["items"].size() != 2) ++failures;
      }
    });
  }
  server.swap(make_service(2.0f));
  for (auto& w : workers) w.join();
  EXPECT_EQ(failures.load(), 0);
  const json v = server.handle(json{{"op", "item_embedding"}, {"item", "a"}});
  EXPECT_EQ(v["vector"], (json{2.0, 0.0}));
  server.stop();
}
