#include "support.hpp"

#include "cema/service.hpp"

#include <doctest.h>
#include <httplib.h>

#include <cstdlib>
#include <sys/wait.h>

using namespace cema;
using namespace cema::testing;

namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string(CEMA_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cema_test_service";
  std::filesystem::create_directories(dir);
  return dir / name;
}

struct Server {
  service::Service svc;
  httplib::Server http;
  std::thread thread;
  int port = 0;

  Server() : svc(service::ScenarioSet::load_dir(source_dir() / "scenarios")) {
    svc.mount(http);
    port = http.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { http.listen_after_bind(); });
    http.wait_until_ready();
  }
  ~Server() {
    http.stop();
    thread.join();
    svc.wait_jobs();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(900, 0);
    return c;
  }
};

std::string open_session(httplib::Client& c, const std::string& scenario) {
  const auto res = c.Post("/sessions", nlohmann::json{{"scenario", scenario}}.dump(), "application/json");
  REQUIRE(res);
  REQUIRE(res->status == 201);
  return nlohmann::json::parse(res->body)["session"];
}

}  // namespace

TEST_CASE("CLI exit codes") {
  CHECK(cli("--bogus") == 2);
  CHECK(cli("query --nope " + (source_dir() / "scenarios/s1.json").string()) == 2);
  const auto bad = scratch("bad_query.json");
  service::write_file(bad, R"({"type":"what","vid":0,"query_time":45})");
  CHECK(cli("query " + (source_dir() / "scenarios/s1.json").string() + " " + bad.string()) == 2);

  const auto trace = scratch("s1.jsonl");
  REQUIRE(cli("run " + (source_dir() / "scenarios/s1.json").string() + " --seed 21 --out " + trace.string()) == 0);
  const std::string text = service::read_file(trace);
  const Scenario s = scenario("s1");
  const JointTrace back = import_jsonl(text, s), ref = service::factual_trace(s, 21);
  REQUIRE(back.frames.size() == ref.frames.size());
  CHECK(label_actions(back, 0, s.graph).labels == label_actions(ref, 0, s.graph).labels);
  for (int k = ref.start; k <= ref.end(); ++k)
    for (const auto& [id, st] : ref.at(k)) CHECK((back.state(id, k)->position - st.position).norm() < 1e-6);

  SUBCASE("degenerate data") {
    const auto road = scratch("road.json");
    service::write_file(road, straight_road(300.0, 10.0).dump());
    const auto q = scratch("road_query.json");
    service::write_file(q, R"({"type":"why","vid":0,"tense":"present","actions":["Continue"],"query_time":80})");
    CHECK(cli("query " + road.string() + " " + q.string() + " --K 10 --alpha 0 --budget 20") == 3);
  }
}

TEST_CASE("HTTP API") {
  Server server;
  auto c = server.client();

  SUBCASE("listing and traces") {
    const auto list = c.Get("/scenarios");
    REQUIRE(list);
    CHECK(list->status == 200);
    CHECK(list->body.find("s1") != std::string::npos);
    const auto tr = c.Get("/scenarios/s1/trace?seed=21");
    REQUIRE(tr);
    CHECK(tr->status == 200);
    CHECK(c.Get("/scenarios/nope")->status == 404);
    CHECK(c.Get("/scenarios/s1/trace?seed=x")->status == 400);
  }
  SUBCASE("malformed requests") {
    const std::string id = open_session(c, "s1");
    const auto res = c.Post("/sessions/" + id + "/query", R"({"type":"what","vid":0,"query_time":45})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 422);
    CHECK(nlohmann::json::parse(res->body)["error"]["message"].get<std::string>().find("action_time") != std::string::npos);
    CHECK(c.Post("/sessions/" + id + "/query", "{", "application/json")->status == 400);
    CHECK(c.Post("/sessions/zz/query", "{}", "application/json")->status == 404);
    CHECK(c.Post("/sessions", R"({"scenario":"nope"})", "application/json")->status == 422);
    CHECK(c.Post("/sessions/" + id + "/query", R"({"follow_up":"why"})", "application/json")->status == 422);
  }
  SUBCASE("S1 conversation, reproducibility and CLI agreement") {
    const std::string body = service::read_file(source_dir() / "queries/q_s1a.json");
    const std::string a = open_session(c, "s1");
    const auto first = c.Post("/sessions/" + a + "/query", body, "application/json");
    REQUIRE(first);
    REQUIRE(first->status == 200);
    const auto ja = nlohmann::json::parse(first->body);
    CHECK(ja["explanation"]["text"] == "It will decrease the time to the goal.");

    const auto why = c.Post("/sessions/" + a + "/query", R"({"follow_up":"why"})", "application/json");
    REQUIRE(why->status == 200);
    CHECK(nlohmann::json::parse(why->body)["explanation"]["text"] == "Because vehicle 1 will be slower than us.");
    const auto why2 = c.Post("/sessions/" + a + "/query", R"({"follow_up":"why"})", "application/json");
    REQUIRE(why2->status == 200);
    CHECK(nlohmann::json::parse(why2->body)["explanation"]["text"] == "It will decelerate and turn right.");
    const auto hist = nlohmann::json::parse(c.Get("/sessions/" + a + "/history")->body);
    CHECK(hist["turns"].size() == 3);

    const std::string b = open_session(c, "s1");
    const auto second = c.Post("/sessions/" + b + "/query", body, "application/json");
    REQUIRE(second->status == 200);
    const auto jb = nlohmann::json::parse(second->body);
    CHECK(service::dump(ja["report"]) == service::dump(jb["report"]));

    const auto out = scratch("s1a_answer.json");
    REQUIRE(cli("query " + (source_dir() / "scenarios/s1.json").string() + " " +
                (source_dir() / "queries/q_s1a.json").string() + " --K 100 --alpha 0.1 --seed 21 --out " + out.string()) ==
            0);
    const auto jc = nlohmann::json::parse(service::read_file(out));
    CHECK(service::dump(jc["report"]) == service::dump(ja["report"]));
    CHECK(jc["explanation"] == ja["explanation"]);
  }
}
