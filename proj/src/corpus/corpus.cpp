#include "rswm/corpus/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "rswm/common/base64.hpp"
#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/corpus/caption.hpp"
#include "rswm/metadata.hpp"
#include "rswm/prompts.hpp"

namespace rswm::corpus {

using nlohmann::json;

namespace {

bool earlier(const Timestamp& a, const Timestamp& b) {
    return std::tie(a.year, a.month, a.day, a.hour) < std::tie(b.year, b.month, b.day, b.hour);
}

std::string format_double(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string format_time(const Timestamp& t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d %02d:00", t.year, t.month, t.day, t.hour);
    return buf;
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return out;
}

bool is_number(const std::string& tok) {
    if (tok.empty()) return false;
    std::size_t i = tok[0] == '-' || tok[0] == '+' ? 1 : 0;
    bool digit = false, dot = false;
    for (; i < tok.size(); ++i) {
        if (std::isdigit(static_cast<unsigned char>(tok[i]))) digit = true;
        else if (tok[i] == '.' && !dot) dot = true;
        else return false;
    }
    return digit;
}

bool has_digit(const std::string& tok) {
    return std::any_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

json rect_box(const worldgen::Rect& r, int size) {
    // [x1, y1, x2, y2] on a [0, 1000) grid.
    const auto scale = [&](int v) { return v * 1000 / size; };
    return json::array({scale(r.col), scale(r.row), scale(r.col + r.width), scale(r.row + r.height)});
}

bool is_stcqa_slot(int i, double fraction) {
    return std::floor((i + 1) * fraction) > std::floor(i * fraction);
}

struct PairDraw {
    Observation pre;
    Observation post;
    worldgen::ChangeRecord truth;
    int question = 0;
};

Observation observe(const worldgen::SceneState& scene, std::uint64_t seed) {
    Observation o;
    o.location_id = scene.location_id;
    o.epoch = scene.epoch;
    o.meta = worldgen::sample_acquisition(scene, seed);
    o.image = quantize_rgb8(worldgen::render_observation(scene, o.meta));
    o.caption = describe_observation(scene, o.meta);
    o.scene = scene;
    return o;
}

std::optional<PairDraw> draw_pair(const CorpusConfig& config, std::int64_t location) {
    const std::uint64_t seed = split_seed(config.seed, static_cast<std::uint64_t>(location));
    Rng rng(split_seed(seed, 1));
    const int span = static_cast<int>(rng.uniform_int(config.min_span_months, config.max_span_months));
    const auto scene0 = worldgen::generate_scene(config.seed, location, config.world);
    const auto scene1 = worldgen::evolve_scene(scene0, span, split_seed(seed, 2), config.world);

    std::vector<Observation> obs;
    for (int k = 0; k < config.acquisitions_per_epoch; ++k) obs.push_back(observe(scene0, split_seed(seed, 10 + static_cast<std::uint64_t>(k))));
    for (int k = 0; k < config.acquisitions_per_epoch; ++k) obs.push_back(observe(scene1, split_seed(seed, 100 + static_cast<std::uint64_t>(k))));
    for (const auto& [a, b] : pair_temporal(obs)) {
        if (obs[a].epoch == obs[b].epoch) continue;
        PairDraw d;
        d.pre = obs[a];
        d.post = obs[b];
        d.truth = worldgen::diff_scenes(*d.pre.scene, *d.post.scene, d.pre.meta, d.post.meta);
        d.question = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(question_bank().size()) - 1));
        return d;
    }
    return std::nullopt;
}

template <typename T>
T take(const json& j, const char* key) {
    if (!j.contains(key)) throw FormatError(std::string("record field missing: ") + key);
    return j.at(key).get<T>();
}

} // namespace

std::string_view to_string(Task t) {
    switch (t) {
    case Task::fsf: return "fsf";
    case Task::tfsf: return "tfsf";
    case Task::stcqa: return "stcqa";
    }
    return "";
}

Task task_from_string(std::string_view s) {
    if (s == "fsf") return Task::fsf;
    if (s == "tfsf") return Task::tfsf;
    if (s == "stcqa") return Task::stcqa;
    throw InvalidInput("unknown task: " + std::string(s));
}

bool cloud_filter(const AcqMetadata& meta) { return meta.cloud_cover <= kMaxCloudCover; }

std::vector<std::pair<std::size_t, std::size_t>> pair_temporal(const std::vector<Observation>& observations) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < observations.size(); ++i) {
        if (!cloud_filter(observations[i].meta)) continue;
        for (std::size_t j = 0; j < observations.size(); ++j) {
            if (i == j || !cloud_filter(observations[j].meta)) continue;
            if (observations[i].location_id != observations[j].location_id) continue;
            if (!earlier(observations[i].meta.timestamp, observations[j].meta.timestamp)) continue;
            out.emplace_back(i, j);
        }
    }
    return out;
}

Draft draft_caption(const Observation& pre, const Observation& post, const worldgen::ChangeRecord& truth) {
    require(truth.location_id == pre.location_id && truth.location_id == post.location_id, "draft_caption: truth is for another location");
    require(truth.epoch_pre == pre.epoch && truth.epoch_post == post.epoch, "draft_caption: truth epochs do not match the pair");
    if (pre.scene && post.scene) {
        require(worldgen::diff_scenes(*pre.scene, *post.scene, pre.meta, post.meta) == truth, "draft_caption: truth disagrees with the scenes");
    }
    require(post.scene.has_value(), "draft_caption: post observation lacks its scene");
    Draft d;
    d.caption = render_caption(facts_from_truth(truth, pre.meta, post.meta));
    d.post_prompt = forecast_instruction(truth, *post.scene, post.meta);
    return d;
}

json refine_context(const Observation& pre, const Observation& post, const worldgen::ChangeRecord& truth) {
    // Key object: the largest changed region, else the largest unchanged one.
    worldgen::Rect box{0, 0, truth.size, truth.size};
    std::string label_pre = "scene", label_post = "scene";
    int best = -1;
    for (const auto& c : truth.changed) {
        if (c.region.area() > best) {
            best = c.region.area();
            box = c.region;
            label_pre = std::string(class_phrase(c.from));
            label_post = std::string(class_phrase(c.to));
        }
    }
    if (best < 0) {
        for (const auto& u : truth.unchanged) {
            if (u.region.area() > best) {
                best = u.region.area();
                box = u.region;
                label_pre = label_post = std::string(class_phrase(u.cls));
            }
        }
    }
    const int size = truth.size > 0 ? truth.size : 1;
    return {{"center_lat_lon", format_double(pre.meta.lat, 4) + ", " + format_double(pre.meta.lon, 4)},
            {"time[0]", format_time(pre.meta.timestamp)},
            {"time[1]", format_time(post.meta.timestamp)},
            {"new_xyxy_box[0]", rect_box(box, size).dump()},
            {"new_xyxy_box[1]", rect_box(box, size).dump()},
            {"category[0]", label_pre},
            {"category[1]", label_post},
            {"sun_azimuth[0]", format_double(pre.meta.sun_azimuth, 1)},
            {"sun_azimuth[1]", format_double(post.meta.sun_azimuth, 1)},
            {"sun_elevation[0]", format_double(pre.meta.sun_elevation, 1)},
            {"sun_elevation[1]", format_double(post.meta.sun_elevation, 1)},
            {"off_nadir_angle[0]", format_double(pre.meta.off_nadir, 1)},
            {"off_nadir_angle[1]", format_double(post.meta.off_nadir, 1)},
            {"cloud_cover[0]", format_double(pre.meta.cloud_cover * 100.0, 1)},
            {"cloud_cover[1]", format_double(post.meta.cloud_cover * 100.0, 1)}};
}

std::string normalize_spacing(std::string_view text) {
    std::string spaced;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        const bool decimal_point = ch == '.' && i > 0 && i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i - 1])) &&
                                   std::isdigit(static_cast<unsigned char>(text[i + 1]));
        if ((ch == ',' || ch == '.' || ch == ';' || ch == '?' || ch == '!' || ch == '%') && !decimal_point) {
            spaced += ' ';
            spaced += ch;
            spaced += ' ';
        } else if (text.substr(i, 2) == "\xC2\xB0") { // degree sign
            spaced += " \xC2\xB0 ";
            ++i;
        } else {
            spaced += ch;
        }
    }
    std::istringstream in(spaced);
    std::string word, out;
    while (in >> word) {
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

std::string strip_numerals(std::string_view text) {
    std::istringstream in(normalize_spacing(text));
    std::vector<std::string> toks;
    for (std::string w; in >> w;) toks.push_back(w);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        const auto& t = toks[i];
        if (is_number(t)) {
            const double v = std::strtod(t.c_str(), nullptr);
            const std::string next = i + 1 < toks.size() ? lower(toks[i + 1]) : "";
            if (next == "degrees" || next == "degree" || next == "\xC2\xB0") {
                out.emplace_back(metadata::shadow_phrase(metadata::shadow_class(std::clamp(v, 0.0, 90.0))));
                ++i;
            } else if (next == "%" || next == "percent") {
                out.emplace_back(metadata::cloud_phrase(metadata::cloud_class(std::clamp(v / 100.0, 0.0, 1.0))));
                ++i;
            } else {
                out.emplace_back("some");
            }
            continue;
        }
        if (has_digit(t)) continue;
        out.push_back(t);
    }
    std::string joined;
    for (const auto& w : out) {
        if (!joined.empty()) joined += ' ';
        joined += w;
    }
    return joined;
}

RefineResponse RuleRefiner::refine(const RefineRequest& request) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::string> kept;
    std::set<std::string> seen;
    for (const auto& s : split_sentences(strip_numerals(request.draft.caption))) {
        if (seen.insert(lower(s)).second) kept.push_back(s);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const std::string& a, const std::string& b) {
        return static_cast<int>(classify_sentence(a)) < static_cast<int>(classify_sentence(b));
    });
    RefineResponse r;
    for (const auto& s : kept) {
        if (!r.refined.caption.empty()) r.refined.caption += ' ';
        r.refined.caption += s;
    }
    r.refined.post_prompt = strip_numerals(request.draft.post_prompt);
    r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return r;
}

std::string HttpRefiner::render_request(const RefineRequest& request) {
    std::vector<std::pair<std::string, std::string>> fields;
    for (const auto& [key, value] : request.context.items()) fields.emplace_back(key, value.get<std::string>());
    fields.emplace_back("temporal_caption", request.draft.caption);
    fields.emplace_back("post_temporal_image_generation", request.draft.post_prompt);
    return prompts::render(prompts::get("text_refinement"), fields);
}

RefineResponse HttpRefiner::refine(const RefineRequest& request) {
    const auto start = std::chrono::steady_clock::now();
    const std::string reply = client_.complete(std::string(prompts::get("text_refinement_system")), render_request(request));
    const auto open = reply.find('{');
    const auto close = reply.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open) throw MalformedResponse("refiner reply has no JSON object");
    RefineResponse r;
    try {
        const json j = json::parse(reply.substr(open, close - open + 1));
        r.refined.caption = j.at("temporal_caption").get<std::string>();
        r.refined.post_prompt = j.at("Post-temporal_image_generation").get<std::string>();
    } catch (const json::exception& e) {
        throw MalformedResponse(std::string("refiner reply: ") + e.what());
    }
    r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return r;
}

RefineOutcome refine_caption(const Draft& draft, const json& context, AnnotationClient& refiner) {
    require(!draft.caption.empty(), "refine_caption: empty draft");
    RefineOutcome out;
    try {
        out.text = refiner.refine({draft, context}).refined;
    } catch (const TransportError& e) {
        out.text = draft;
        out.fallback = true;
        out.error = e.what();
    } catch (const MalformedResponse& e) {
        out.text = draft;
        out.fallback = true;
        out.error = e.what();
    }
    out.text.caption = strip_numerals(out.text.caption);
    out.text.post_prompt = strip_numerals(out.text.post_prompt);
    return out;
}

const std::vector<std::string>& question_bank() {
    static const std::vector<std::string> bank = {
        "describe both the changes and the unchanged aspects between the two images .",
        "what has changed at this location between the two acquisitions , and what has stayed the same ?",
        "compare the two images and explain the changes , the unchanged areas and the differences in acquisition conditions .",
        "summarize the land cover changes and the stable features visible in this image pair ."};
    return bank;
}

PromptRecord assemble_prompt(Task task, PromptParts parts) {
    PromptRecord r;
    r.task = task;
    switch (task) {
    case Task::fsf:
        require(parts.images.size() == 1, "FSF prompt takes exactly one image");
        require(parts.text.empty(), "FSF prompt is text-free");
        require(parts.target_image.has_value() && parts.target_text.empty(), "FSF target is an image");
        break;
    case Task::tfsf:
        require(parts.images.size() == 1, "TFSF prompt takes exactly one image");
        require(!parts.text.empty(), "TFSF prompt needs an instruction");
        require(parts.target_image.has_value() && parts.target_text.empty(), "TFSF target is an image");
        r.instruction = parts.text;
        break;
    case Task::stcqa:
        require(parts.images.size() == 2, "STCQA prompt takes an image pair");
        require(!parts.text.empty(), "STCQA prompt needs a question");
        require(!parts.target_image.has_value() && !parts.target_text.empty(), "STCQA target is text");
        require(earlier(parts.images[0].meta.timestamp, parts.images[1].meta.timestamp), "STCQA images must be in temporal order");
        r.question = parts.text;
        break;
    }
    for (auto& img : parts.images) img.scene.reset();
    if (parts.target_image) parts.target_image->scene.reset();
    r.images = std::move(parts.images);
    r.meta_source = parts.meta_source;
    r.meta_target = parts.meta_target;
    r.target_image = std::move(parts.target_image);
    r.target_text = std::move(parts.target_text);
    r.truth = std::move(parts.truth);
    return r;
}

json to_json(const Observation& o) {
    const auto rgb = to_rgb8(o.image);
    return {{"location_id", o.location_id}, {"epoch", o.epoch},       {"meta", worldgen::to_json(o.meta)},
            {"height", o.image.height},     {"width", o.image.width}, {"rgb8", base64_encode(rgb)},
            {"caption", o.caption}};
}

Observation observation_from_json(const json& j) {
    Observation o;
    o.location_id = take<std::int64_t>(j, "location_id");
    o.epoch = take<int>(j, "epoch");
    o.meta = worldgen::meta_from_json(j.at("meta"));
    const int h = take<int>(j, "height"), w = take<int>(j, "width");
    const auto rgb = base64_decode(take<std::string>(j, "rgb8"));
    if (rgb.size() != static_cast<std::size_t>(h) * w * 3) throw FormatError("observation image has the wrong size");
    o.image = from_rgb8(h, w, rgb);
    o.caption = take<std::string>(j, "caption");
    return o;
}

json to_json(const PromptRecord& r) {
    json images = json::array();
    for (const auto& o : r.images) images.push_back(to_json(o));
    return {{"id", r.id},
            {"split", r.split},
            {"task", std::string(to_string(r.task))},
            {"images", images},
            {"instruction", r.instruction},
            {"question", r.question},
            {"meta_source", worldgen::to_json(r.meta_source)},
            {"meta_target", worldgen::to_json(r.meta_target)},
            {"target_image", r.target_image ? to_json(*r.target_image) : json(nullptr)},
            {"target_text", r.target_text},
            {"truth", worldgen::to_json(r.truth)},
            {"refine_fallback", r.refine_fallback}};
}

PromptRecord record_from_json(const json& j) {
    PromptRecord r;
    r.id = take<std::string>(j, "id");
    r.split = take<std::string>(j, "split");
    r.task = task_from_string(take<std::string>(j, "task"));
    for (const auto& o : j.at("images")) r.images.push_back(observation_from_json(o));
    r.instruction = take<std::string>(j, "instruction");
    r.question = take<std::string>(j, "question");
    r.meta_source = worldgen::meta_from_json(j.at("meta_source"));
    r.meta_target = worldgen::meta_from_json(j.at("meta_target"));
    if (!j.at("target_image").is_null()) r.target_image = observation_from_json(j.at("target_image"));
    r.target_text = take<std::string>(j, "target_text");
    r.truth = worldgen::change_from_json(j.at("truth"));
    r.refine_fallback = take<bool>(j, "refine_fallback");
    return r;
}

bool is_train_split(std::string_view split) { return split == "gagp" || split == "sit" || split == "vro"; }

void CorpusConfig::validate() const {
    for (const auto* name : kSplitNames) {
        const auto it = sizes.find(name);
        if (it == sizes.end()) throw ConfigError(std::string("corpus: missing size for split ") + name);
        if (it->second < 0) throw ConfigError(std::string("corpus: negative size for split ") + name);
    }
    if (sizes.size() != kSplitNames.size()) throw ConfigError("corpus: unknown split name in sizes");
    if (sit_stcqa_fraction < 0 || sit_stcqa_fraction > 1 || vro_stcqa_fraction < 0 || vro_stcqa_fraction > 1)
        throw ConfigError("corpus: task fractions must lie in [0, 1]");
    if (min_span_months < 1 || max_span_months < min_span_months) throw ConfigError("corpus: invalid pairing span");
    if (acquisitions_per_epoch < 1) throw ConfigError("corpus: acquisitions_per_epoch must be >= 1");
    if (train_locations.begin >= train_locations.end || eval_locations.begin >= eval_locations.end)
        throw ConfigError("corpus: empty location range");
    if (train_locations.begin < eval_locations.end && eval_locations.begin < train_locations.end)
        throw ConfigError("corpus: train and eval location ranges overlap");
    const long train = static_cast<long>(sizes.at("gagp")) + sizes.at("sit") + sizes.at("vro");
    const long eval = static_cast<long>(sizes.at("eval_tfsf")) + sizes.at("eval_stcqa");
    if (train > train_locations.end - train_locations.begin || eval > eval_locations.end - eval_locations.begin)
        throw ConfigError("corpus: location range smaller than the requested split sizes");
    if (refiner != "rule" && refiner != "http") throw ConfigError("corpus: refiner must be 'rule' or 'http'");
    if (refiner == "http" && !refiner_client) throw ConfigError("corpus: http refiner needs refiner_client settings");
}

json to_json(const CorpusConfig& c) {
    json j = {{"seed", c.seed},
              {"sizes", c.sizes},
              {"sit_stcqa_fraction", c.sit_stcqa_fraction},
              {"vro_stcqa_fraction", c.vro_stcqa_fraction},
              {"min_span_months", c.min_span_months},
              {"max_span_months", c.max_span_months},
              {"acquisitions_per_epoch", c.acquisitions_per_epoch},
              {"train_locations", {c.train_locations.begin, c.train_locations.end}},
              {"eval_locations", {c.eval_locations.begin, c.eval_locations.end}},
              {"scene_size", c.world.scene_size},
              {"refiner", c.refiner}};
    if (c.refiner_client) j["refiner_client"] = to_json(*c.refiner_client);
    return j;
}

CorpusConfig corpus_config_from_json(const json& j) {
    CorpusConfig c;
    if (!j.is_object()) throw ConfigError("corpus: section must be an object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "sizes") {
                c.sizes.clear();
                for (const auto& [k, v] : value.items()) c.sizes[k] = v.get<int>();
            } else if (key == "sit_stcqa_fraction") c.sit_stcqa_fraction = value.get<double>();
            else if (key == "vro_stcqa_fraction") c.vro_stcqa_fraction = value.get<double>();
            else if (key == "min_span_months") c.min_span_months = value.get<int>();
            else if (key == "max_span_months") c.max_span_months = value.get<int>();
            else if (key == "acquisitions_per_epoch") c.acquisitions_per_epoch = value.get<int>();
            else if (key == "train_locations") c.train_locations = {value.at(0).get<std::int64_t>(), value.at(1).get<std::int64_t>()};
            else if (key == "eval_locations") c.eval_locations = {value.at(0).get<std::int64_t>(), value.at(1).get<std::int64_t>()};
            else if (key == "scene_size") c.world.scene_size = value.get<int>();
            else if (key == "refiner") c.refiner = value.get<std::string>();
            else if (key == "refiner_client") c.refiner_client = chat_client_config_from_json(value);
            else throw ConfigError("corpus: unknown key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("corpus: ") + e.what());
    }
    c.validate();
    return c;
}

json build_corpus(const CorpusConfig& config, const RecordSink& sink, AnnotationClient* refiner) {
    config.validate();
    RuleRefiner rule;
    std::unique_ptr<HttpRefiner> http;
    AnnotationClient* active = refiner;
    if (!active) {
        if (config.refiner == "http") {
            http = std::make_unique<HttpRefiner>(*config.refiner_client);
            active = http.get();
        } else {
            active = &rule;
        }
    }

    std::int64_t next_train = config.train_locations.begin;
    std::int64_t next_eval = config.eval_locations.begin;
    std::vector<std::int64_t> train_ids, eval_ids;
    json counts = json::object(), fallbacks = json::object(), tasks = json::object();
    for (const auto* split : kSplitNames) {
        const bool train_side = is_train_split(split);
        const int n = config.sizes.at(split);
        int fallback_count = 0, stcqa_count = 0;
        for (int i = 0; i < n; ++i) {
            std::optional<PairDraw> pair;
            while (!pair) {
                std::int64_t& next = train_side ? next_train : next_eval;
                const auto& range = train_side ? config.train_locations : config.eval_locations;
                if (next >= range.end) throw ConfigError(std::string("corpus: location range exhausted while building ") + split);
                pair = draw_pair(config, next++);
            }
            (train_side ? train_ids : eval_ids).push_back(pair->pre.location_id);

            Task task = Task::fsf;
            const std::string s = split;
            if (s == "sit") task = is_stcqa_slot(i, config.sit_stcqa_fraction) ? Task::stcqa : Task::tfsf;
            else if (s == "vro") task = is_stcqa_slot(i, config.vro_stcqa_fraction) ? Task::stcqa : Task::tfsf;
            else if (s == "eval_tfsf") task = Task::tfsf;
            else if (s == "eval_stcqa") task = Task::stcqa;

            PromptParts parts;
            parts.meta_source = pair->pre.meta;
            parts.meta_target = pair->post.meta;
            parts.truth = pair->truth;
            bool fallback = false;
            if (task == Task::fsf) {
                parts.images = {pair->pre};
                parts.target_image = pair->post;
            } else {
                const auto outcome = refine_caption(draft_caption(pair->pre, pair->post, pair->truth),
                                                    refine_context(pair->pre, pair->post, pair->truth), *active);
                fallback = outcome.fallback;
                if (task == Task::tfsf) {
                    parts.images = {pair->pre};
                    parts.text = outcome.text.post_prompt;
                    parts.target_image = pair->post;
                } else {
                    parts.images = {pair->pre, pair->post};
                    parts.text = question_bank()[static_cast<std::size_t>(pair->question)];
                    parts.target_text = outcome.text.caption;
                    ++stcqa_count;
                }
            }
            PromptRecord rec = assemble_prompt(task, std::move(parts));
            char id[64];
            std::snprintf(id, sizeof id, "%s-%06d", split, i);
            rec.id = id;
            rec.split = split;
            rec.refine_fallback = fallback;
            fallback_count += fallback ? 1 : 0;
            sink(rec);
        }
        counts[split] = n;
        fallbacks[split] = fallback_count;
        tasks[split] = {{"stcqa", stcqa_count}, {"visual", n - stcqa_count}};
    }

    std::set<std::int64_t> train_set(train_ids.begin(), train_ids.end());
    bool disjoint = true;
    for (auto id : eval_ids) disjoint = disjoint && !train_set.count(id);
    auto id_hash = [](std::vector<std::int64_t> ids) {
        std::sort(ids.begin(), ids.end());
        std::string text;
        for (auto id : ids) text += std::to_string(id) + "\n";
        return sha256_hex(std::string_view(text));
    };
    const std::string train_hash = id_hash(train_ids), eval_hash = id_hash(eval_ids);
    return {{"format", "rswm-corpus"},
            {"version", 1},
            {"seed", config.seed},
            {"config", to_json(config)},
            {"counts", counts},
            {"tasks", tasks},
            {"refine_fallbacks", fallbacks},
            {"refiner", active->name()},
            {"prompt_templates", prompts::version_hash()},
            {"train_location_ids_sha256", train_hash},
            {"eval_location_ids_sha256", eval_hash},
            {"split_hash", sha256_hex(std::string_view(train_hash + eval_hash))},
            {"locations_disjoint", disjoint}};
}

Corpus build_corpus(const CorpusConfig& config, AnnotationClient* refiner) {
    Corpus c;
    for (const auto* s : kSplitNames) c.splits[s];
    c.manifest = build_corpus(config, [&](const PromptRecord& r) { c.splits[r.split].push_back(r); }, refiner);
    return c;
}

std::string jsonl_line(const PromptRecord& r) { return to_json(r).dump(); }

json write_corpus(const CorpusConfig& config, const std::filesystem::path& dir, AnnotationClient* refiner) {
    std::filesystem::create_directories(dir);
    std::map<std::string, std::ofstream> files;
    std::map<std::string, std::unique_ptr<Sha256>> hashes;
    for (const auto* s : kSplitNames) {
        files[s].open(dir / (std::string(s) + ".jsonl"), std::ios::binary | std::ios::trunc);
        if (!files[s]) throw InvalidInput("cannot write corpus file in " + dir.string());
        hashes[s] = std::make_unique<Sha256>();
    }
    json manifest = build_corpus(
        config,
        [&](const PromptRecord& r) {
            const std::string line = jsonl_line(r) + "\n";
            files[r.split] << line;
            hashes[r.split]->update(std::string_view(line));
        },
        refiner);
    json sha = json::object();
    for (const auto* s : kSplitNames) {
        files[s].close();
        sha[s] = hashes[s]->hex_digest();
    }
    manifest["sha256"] = sha;
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << "\n";
    return manifest;
}

std::vector<PromptRecord> read_split(const std::filesystem::path& dir, const std::string& split) {
    std::ifstream in(dir / (split + ".jsonl"), std::ios::binary);
    if (!in) throw InvalidInput("missing corpus split file: " + (dir / (split + ".jsonl")).string());
    std::vector<PromptRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw FormatError("corpus line " + std::to_string(out.size() + 1) + " of " + split + ": " + e.what());
        }
    }
    return out;
}

json read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw InvalidInput("missing corpus manifest in " + dir.string());
    return json::parse(in);
}

} // namespace rswm::corpus
