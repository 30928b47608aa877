#pragma once

#include <avd/model_io.hpp>
#include <avd/service.hpp>
#include <avd/viewpoint.hpp>

#include <httplib.h>
#include <json.hpp>

#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

// JSON API over a workspace. Queries read an immutable snapshot that is
// replaced whole after ingestion and after each finished job.
namespace avd {

struct ApiOptions {
    JobOptions job;
    SegmentOptions segments;
    std::size_t default_limit = 20;
};

class ApiServer {
public:
    ApiServer(Workspace ws, ApiOptions opt, std::ostream* log = nullptr)
        : ws_(std::move(ws)), opt_(std::move(opt)), log_(log), snapshot_(load_snapshot(ws_))
    {
    }

    ~ApiServer()
    {
        std::vector<std::thread> threads;
        {
            std::lock_guard lock(jobs_mu_);
            threads.swap(threads_);
        }
        for (auto& t : threads)
            t.join();
    }

    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    std::shared_ptr<const IndexSnapshot> snapshot() const
    {
        std::lock_guard lock(snap_mu_);
        return snapshot_;
    }

    void reload()
    {
        auto fresh = load_snapshot(ws_);
        std::lock_guard lock(snap_mu_);
        snapshot_ = std::move(fresh);
    }

    /// Blocks until every submitted job has finished.
    void wait_for_jobs()
    {
        for (;;) {
            std::vector<std::thread> threads;
            {
                std::lock_guard lock(jobs_mu_);
                threads.swap(threads_);
            }
            if (threads.empty())
                return;
            for (auto& t : threads)
                t.join();
        }
    }

    void register_routes(httplib::Server& srv)
    {
        srv.Get("/classes", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, [&] { return nlohmann::json{{"classes", indexed_classes(*snapshot())}}; });
        });

        srv.Get("/media", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, [&] {
                nlohmann::json arr = nlohmann::json::array();
                for (const MediaRecord& m : snapshot()->media)
                    arr.push_back(to_json(m));
                return nlohmann::json{{"media", arr}};
            });
        });

        srv.Post("/media", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] {
                const auto body = parse_body(req);
                if (!body.contains("path") || !body["path"].is_string())
                    throw Error("body must contain a string 'path'");
                IngestResult r;
                {
                    std::lock_guard lock(write_mu_);
                    r = ingest(ws_, body["path"].get<std::string>());
                }
                reload();
                nlohmann::json arr = nlohmann::json::array();
                for (const MediaRecord& m : r.media)
                    arr.push_back(to_json(m));
                return nlohmann::json{{"media", arr}, {"diagnostics", r.diagnostics}};
            });
        });

        srv.Post("/jobs", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] {
                const auto body = parse_body(req);
                if (!body.contains("model_path") || !body["model_path"].is_string())
                    throw Error("body must contain a string 'model_path'");
                std::optional<std::string> media_id;
                if (body.contains("media_id") && !body["media_id"].is_null())
                    media_id = body["media_id"].get<std::string>();
                std::optional<double> floor;
                if (body.contains("floor") && !body["floor"].is_null())
                    floor = body["floor"].get<double>();
                const int id = submit_job(body["model_path"].get<std::string>(), media_id, floor);
                res.status = 202;
                return nlohmann::json{{"job_id", id}};
            });
        });

        srv.Get("/jobs/:id", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] {
                const int id = to_int(req.path_params.at("id"), "job id");
                std::lock_guard lock(jobs_mu_);
                const auto it = jobs_.find(id);
                if (it == jobs_.end())
                    throw NotFound("unknown job " + std::to_string(id));
                return job_json(id, *it->second);
            });
        });

        srv.Get("/search/images", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] {
                const std::string cls = req.get_param_value("class");
                if (cls.empty())
                    throw Error("missing 'class'");
                const double min_score = param_double(req, "min_score", -std::numeric_limits<double>::infinity());
                const std::size_t limit = param_size(req, "limit", opt_.default_limit);
                const std::size_t offset = param_size(req, "offset", 0);
                return to_json(search_images(*snapshot(), cls, min_score, limit, offset), limit, offset);
            });
        });

        srv.Get("/media/:id/segments", [this](const httplib::Request& req, httplib::Response& res) {
            reply(res, [&] {
                const std::string cls = req.get_param_value("class");
                if (cls.empty())
                    throw Error("missing 'class'");
                SegmentOptions so = opt_.segments;
                so.min_score = param_double(req, "min_score", -std::numeric_limits<double>::infinity());
                so.gap_tolerance = static_cast<int>(param_size(req, "gap", static_cast<std::size_t>(so.gap_tolerance)));
                so.min_length = static_cast<int>(param_size(req, "min_len", static_cast<std::size_t>(so.min_length)));
                const auto snap = snapshot();
                const std::string id = req.path_params.at("id");
                nlohmann::json arr = nlohmann::json::array();
                for (const Segment& s : search_video(*snap, id, cls, so))
                    arr.push_back(to_json(s));
                const MediaRecord* m = snap->find(id);
                return nlohmann::json{{"media_id", id}, {"fps", m->fps}, {"frame_count", m->frame_count},
                                      {"segments", arr}};
            });
        });

        srv.Get("/media/:id/frame/:n", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                const auto snap = snapshot();
                const MediaRecord* m = snap->find(req.path_params.at("id"));
                if (!m)
                    throw NotFound("unknown media '" + req.path_params.at("id") + "'");
                const auto path = m->frame_path(to_int(req.path_params.at("n"), "frame number"));
                const auto bytes = detail::read_file_bytes(path);
                const bool color = bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6';
                res.set_content(std::string(bytes.begin(), bytes.end()),
                                color ? "image/x-portable-pixmap" : "image/x-portable-graymap");
            } catch (const std::exception& e) {
                fail(res, e);
            }
        });
    }

    int submit_job(const std::filesystem::path& model_path, const std::optional<std::string>& media_id,
                   std::optional<double> floor)
    {
        auto model = std::make_shared<DetectorModel>(load_model(model_path));
        std::vector<MediaRecord> media;
        const auto snap = snapshot();
        if (media_id) {
            const MediaRecord* m = snap->find(*media_id);
            if (!m)
                throw NotFound("unknown media '" + *media_id + "'");
            media.push_back(*m);
        } else {
            media = snap->media;
        }
        JobOptions jo = opt_.job;
        if (floor)
            jo.floor = floor;

        auto state = std::make_shared<JobState>();
        std::lock_guard lock(jobs_mu_);
        const int id = next_job_++;
        jobs_[id] = state;
        threads_.emplace_back([this, state, model, media = std::move(media), jo] {
            try {
                JobSummary s;
                {
                    std::lock_guard wl(write_mu_);
                    s = run_job(ws_, media, *model, sample_view_grid(jo.views), jo, &state->progress, log_);
                }
                reload();
                std::lock_guard sl(state->mu);
                state->summary = s;
                state->state = "done";
            } catch (const std::exception& e) {
                std::lock_guard sl(state->mu);
                state->state = "failed";
                state->error = e.what();
            }
        });
        return id;
    }

private:
    struct JobState {
        JobProgress progress;
        std::mutex mu;
        std::string state = "running";
        std::string error;
        std::optional<JobSummary> summary;
    };

    static nlohmann::json job_json(int id, JobState& s)
    {
        std::lock_guard lock(s.mu);
        nlohmann::json j{{"job_id", id},
                         {"state", s.state},
                         {"frames_total", s.progress.frames_total.load()},
                         {"frames_done", s.progress.frames_done.load()},
                         {"frames_skipped", s.progress.frames_skipped.load()},
                         {"frames_computed", s.progress.frames_computed.load()},
                         {"frames_failed", s.progress.frames_failed.load()},
                         {"pyramids_built", s.progress.pyramids_built.load()},
                         {"pyramids_loaded", s.progress.pyramids_loaded.load()}};
        if (!s.error.empty())
            j["error"] = s.error;
        if (s.summary)
            j["model"] = s.summary->model;
        return j;
    }

    static nlohmann::json parse_body(const httplib::Request& req)
    {
        try {
            auto j = nlohmann::json::parse(req.body);
            if (!j.is_object())
                throw Error("request body must be a JSON object");
            return j;
        } catch (const nlohmann::json::exception& e) {
            throw Error(std::string("malformed JSON body: ") + e.what());
        }
    }

    static int to_int(const std::string& s, const char* what)
    {
        try {
            std::size_t used = 0;
            const int v = std::stoi(s, &used);
            if (used == s.size())
                return v;
        } catch (const std::logic_error&) {
        }
        throw Error(std::string("bad ") + what + " '" + s + "'");
    }

    static double param_double(const httplib::Request& req, const char* key, double fallback)
    {
        if (!req.has_param(key))
            return fallback;
        const std::string s = req.get_param_value(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used == s.size())
                return v;
        } catch (const std::logic_error&) {
        }
        throw Error(std::string("bad '") + key + "' value '" + s + "'");
    }

    static std::size_t param_size(const httplib::Request& req, const char* key, std::size_t fallback)
    {
        if (!req.has_param(key))
            return fallback;
        const std::string s = req.get_param_value(key);
        try {
            std::size_t used = 0;
            const long long v = std::stoll(s, &used);
            if (used == s.size() && v >= 0)
                return static_cast<std::size_t>(v);
        } catch (const std::logic_error&) {
        }
        throw Error(std::string("bad '") + key + "' value '" + s + "'");
    }

    static void fail(httplib::Response& res, const std::exception& e)
    {
        res.status = dynamic_cast<const NotFound*>(&e) ? 404 : 400;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    }

    template <class F>
    static void reply(httplib::Response& res, F&& body)
    {
        try {
            const nlohmann::json j = body();
            res.set_content(j.dump(), "application/json");
        } catch (const std::exception& e) {
            fail(res, e);
        }
    }

    Workspace ws_;
    ApiOptions opt_;
    std::ostream* log_;

    mutable std::mutex snap_mu_;
    std::shared_ptr<const IndexSnapshot> snapshot_;

    std::mutex write_mu_; // single writer per workspace
    std::mutex jobs_mu_;
    std::map<int, std::shared_ptr<JobState>> jobs_;
    std::vector<std::thread> threads_;
    int next_job_ = 1;
};

} // namespace avd
