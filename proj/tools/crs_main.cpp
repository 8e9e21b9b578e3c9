// crs: command-line front end for data preparation, training, evaluation
// and serving.

#include "crs/config.hpp"
#include "crs/conversation.hpp"
#include "crs/corpus.hpp"
#include "crs/em_trainer.hpp"
#include "crs/encoder.hpp"
#include "crs/evaluation.hpp"
#include "crs/intents.hpp"
#include "crs/pipeline.hpp"
#include "crs/service.hpp"
#include "crs/synthetic.hpp"
#include "crs/text_embed.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

namespace fs = std::filesystem;
using namespace crs;

namespace {

constexpr const char* kDatasetFile = "dataset.json";

void write_file(const std::string& path, const std::string& content) {
    if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct Loaded {
    Dataset dataset;
    Split split;
};

Loaded load_dataset_dir(const std::string& dir) {
    Loaded l;
    l.dataset = load_snapshot((fs::path(dir) / kDatasetFile).string());
    l.split = leave_last_out_split(l.dataset);
    return l;
}

std::vector<ItemId> catalog_ids(const Catalog& catalog) {
    std::vector<ItemId> ids;
    for (const auto& item : catalog.items()) ids.push_back(item.id);
    return ids;
}

std::shared_ptr<embed::TextEncoder> make_text_encoder(const Settings& s) {
    std::shared_ptr<embed::EmbeddingProvider> provider;
    if (!s.text.endpoint.empty()) {
        provider = std::make_shared<embed::RemoteProvider>(s.text.endpoint, s.text.token, s.text.model,
                                                           s.text.dim);
    } else {
        provider = std::make_shared<embed::LocalHashProvider>(s.text.dim);
    }
    auto cache = s.text.cache_path.empty() ? std::make_shared<embed::EmbeddingCache>()
                                           : std::make_shared<embed::EmbeddingCache>(s.text.cache_path);
    const std::string tmpl =
        s.text.template_text.empty() ? std::string(embed::kDefaultTemplate) : s.text.template_text;
    return std::make_shared<embed::TextEncoder>(provider, cache, tmpl);
}

std::shared_ptr<const Recommender> load_recommender(const std::string& checkpoint, const Settings& s,
                                                    RankMode mode = RankMode::full) {
    auto bundle = std::make_shared<const ModelBundle>(ModelBundle::load(checkpoint));
    Settings adjusted = s;
    adjusted.text.dim = bundle->latent.dims.text;
    auto text = make_text_encoder(adjusted);
    if (text->provider_id() != bundle->text_provider) {
        throw ConfigError("checkpoint was trained with text provider '" + bundle->text_provider +
                          "' but '" + text->provider_id() + "' is configured");
    }
    return std::make_shared<const Recommender>(bundle, text, mode);
}

std::shared_ptr<const ConversationEngine> make_engine(std::shared_ptr<const Recommender> rec,
                                                      std::shared_ptr<const Catalog> catalog,
                                                      const Settings& s, std::size_t top_k,
                                                      int max_turns) {
    std::shared_ptr<RuleExtractor> extractor;
    std::shared_ptr<Reranker> reranker;
    if (!s.service.extractor_endpoint.empty()) {
        extractor = std::make_shared<HttpRuleExtractor>(s.service.extractor_endpoint);
    }
    if (!s.service.reranker_endpoint.empty()) {
        reranker = std::make_shared<HttpReranker>(s.service.reranker_endpoint);
    }
    return std::make_shared<const ConversationEngine>(std::move(rec), std::move(catalog),
                                                      EngineOptions{top_k, max_turns}, extractor,
                                                      reranker);
}

std::vector<UserId> eval_users(const Split& split, std::size_t sample, std::uint64_t seed) {
    if (sample == 0) return {};
    return sample_users(split, sample, seed);
}

void write_report(const EvalReport& report, const std::string& out, const std::string& csv) {
    const std::string body = report.to_json().dump(2) + "\n";
    if (out.empty()) {
        std::cout << body;
    } else {
        write_file(out, body);
    }
    if (!csv.empty()) write_file(csv, report.to_csv());
    std::cerr << report.kind << " evaluation finished in " << report.runtime_seconds << " s\n";
    for (const auto& [name, v] : report.metrics) std::cerr << "  " << name << " = " << v << "\n";
}

Service* g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent-intent conversational recommender"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "key = value configuration file");
    app.add_option("--seed", seed, "seed for every random component");

    std::string data, out, raw_format, encoder_path, intents_path, checkpoint, history_path, csv_path,
        grid_path, variant_name = "F", mode_name = "full", user_id, cache_path, host;
    int k_core = -1, num_intents = 0, port = -1;
    std::vector<int> ks;
    std::size_t sample = 0;
    double noise = -1.0;
    bool no_inference = false, direct_kl = false, no_recloss = false, no_augment = false,
         trainable_intents = false;
    PlantedConfig planted;

    auto* synth = app.add_subcommand("make-synthetic", "write a planted-intent corpus");
    synth->add_option("--out", out, "output directory")->required();
    synth->add_option("--users", planted.users);
    synth->add_option("--items", planted.items);
    synth->add_option("--blocks", planted.blocks);
    synth->add_option("--in-block", planted.in_block);

    auto* ingest = app.add_subcommand("ingest", "load raw interactions and metadata");
    ingest->add_option("--data", data, "raw directory (interactions.tsv|jsonl, items.jsonl, schema.json)")
        ->required();
    ingest->add_option("--out", out, "dataset directory")->required();
    ingest->add_option("--format", raw_format, "tsv or jsonl (default: detected)");
    ingest->add_option("--k-core", k_core, "k-core filter (0 disables)");

    auto* pretrain = app.add_subcommand("pretrain-encoder", "pretrain the behaviour encoder");
    pretrain->add_option("--data", data)->required();
    pretrain->add_option("--out", out, "encoder checkpoint")->required();
    pretrain->add_option("--history", history_path, "per-epoch loss (JSON)");

    auto* fit = app.add_subcommand("fit-intents", "cluster user embeddings into intents");
    fit->add_option("--data", data)->required();
    fit->add_option("--encoder", encoder_path)->required();
    fit->add_option("--k", num_intents, "number of intents (default: train.num_intents)");
    fit->add_option("--out", out, "intent checkpoint")->required();

    auto* train = app.add_subcommand("train-em", "train the latent-intent model");
    train->add_option("--data", data)->required();
    train->add_option("--encoder", encoder_path)->required();
    train->add_option("--intents", intents_path)->required();
    train->add_option("--out", out, "model checkpoint")->required();
    train->add_option("--history", history_path, "per-epoch history (JSON lines)");
    train->add_flag("--no-inference-model", no_inference);
    train->add_flag("--direct-kl", direct_kl);
    train->add_flag("--no-recloss", no_recloss);
    train->add_flag("--no-augment", no_augment);
    train->add_flag("--trainable-intents", trainable_intents);

    auto* one = app.add_subcommand("eval-oneturn", "one-turn Recall/NDCG");
    one->add_option("--data", data)->required();
    one->add_option("--checkpoint", checkpoint)->required();
    one->add_option("--out", out, "JSON report (default: stdout)");
    one->add_option("--csv", csv_path);
    one->add_option("--k", ks)->delimiter(',');
    one->add_option("--sample", sample, "evaluate a uniform sample of test users");
    one->add_option("--mode", mode_name, "full or cond_indep");

    auto* multi = app.add_subcommand("eval-multiturn", "simulated multi-turn S@3, S@5, AT");
    multi->add_option("--data", data)->required();
    multi->add_option("--checkpoint", checkpoint)->required();
    multi->add_option("--variant", variant_name, "B, F or V");
    multi->add_option("--out", out);
    multi->add_option("--csv", csv_path);
    multi->add_option("--sample", sample);
    multi->add_option("--noise", noise, "probability of an uninformative user turn");

    auto* sw = app.add_subcommand("sweep", "train and evaluate over a hyperparameter grid");
    sw->add_option("--grid", grid_path, "JSON grid")->required();
    sw->add_option("--data", data)->required();
    sw->add_option("--encoder", encoder_path, "pretrained encoder (default: pretrain once)");
    sw->add_option("--out", out, "CSV table")->required();
    sw->add_option("--k", ks)->delimiter(',');

    auto* warm = app.add_subcommand("warm-cache", "embed every item description into the cache");
    warm->add_option("--data", data)->required();
    warm->add_option("--cache", cache_path)->required();

    auto* serve = app.add_subcommand("serve", "run the HTTP session service");
    serve->add_option("--checkpoint", checkpoint);
    serve->add_option("--data", data);
    serve->add_option("--host", host);
    serve->add_option("--port", port);

    auto* sim = app.add_subcommand("simulate", "print one simulated dialogue");
    sim->add_option("--data", data)->required();
    sim->add_option("--checkpoint", checkpoint)->required();
    sim->add_option("--user", user_id)->required();
    sim->add_option("--variant", variant_name);
    sim->add_option("--noise", noise);

    CLI11_PARSE(app, argc, argv);

    try {
        Settings s = config_path.empty() ? Settings{} : apply_config(load_config(config_path));
        apply_env_overrides(s);
        if (seed) apply_seed(s, *seed);
        const std::uint64_t eval_seed = seed.value_or(s.train.seed);
        if (noise >= 0.0) s.eval.noise = noise;
        if (!ks.empty()) s.eval.ks = ks;
        if (sample > 0) s.eval.sample = sample;

        if (*synth) {
            if (seed) planted.seed = *seed;
            write_planted_corpus(make_planted_corpus(planted), out);
            std::cerr << "wrote planted corpus to " << out << "\n";
        } else if (*ingest) {
            const fs::path raw(data);
            InteractionFormat format;
            fs::path interactions;
            if (!raw_format.empty()) {
                format = parse_interaction_format(raw_format);
                interactions = raw / (format == InteractionFormat::tsv ? "interactions.tsv" : "interactions.jsonl");
            } else if (fs::exists(raw / "interactions.tsv")) {
                format = InteractionFormat::tsv;
                interactions = raw / "interactions.tsv";
            } else {
                format = InteractionFormat::jsonl;
                interactions = raw / "interactions.jsonl";
            }
            std::optional<CatalogSchema> schema;
            if (fs::exists(raw / "schema.json")) schema = load_schema((raw / "schema.json").string());
            LoadReport rep;
            auto catalog = load_catalog((raw / "items.jsonl").string(), schema, &rep);
            auto dataset = load_interactions(interactions.string(), format, std::move(catalog), &rep);
            const int k = k_core >= 0 ? k_core : s.k_core;
            if (k > 0) dataset = apply_k_core(dataset, k);
            fs::create_directories(out);
            save_snapshot(dataset, (fs::path(out) / kDatasetFile).string());
            const auto st = dataset_stats(dataset);
            std::cerr << "users=" << st.num_users << " items=" << st.num_items
                      << " actions=" << st.num_actions << " avg_len=" << st.avg_seq_len
                      << " sparsity=" << st.sparsity << " dropped_missing_metadata="
                      << rep.dropped_missing_metadata << " dropped_attributes=" << rep.dropped_attributes
                      << "\n";
        } else if (*pretrain) {
            const auto l = load_dataset_dir(data);
            auto r = pretrain_encoder(l.split.train, catalog_ids(l.dataset.catalog), s.encoder);
            r.encoder.save(out);
            if (!history_path.empty()) write_file(history_path, nlohmann::json(r.loss_history).dump() + "\n");
            if (!r.loss_history.empty()) std::cerr << "final encoder loss " << r.loss_history.back() << "\n";
        } else if (*fit) {
            const auto l = load_dataset_dir(data);
            const auto encoder = BehaviorEncoder::load(encoder_path);
            const int k = num_intents > 0 ? num_intents : s.train.num_intents;
            const auto r = fit_kmeans(user_embeddings(l.split, encoder), k, s.train.seed, s.intents.max_iters,
                                      1e-6, s.intents.restarts);
            r.space.save(out);
            std::cerr << "k-means: K=" << k << " iterations=" << r.iterations
                      << " inertia=" << r.final_inertia << "\n";
        } else if (*train) {
            const auto l = load_dataset_dir(data);
            const auto encoder = BehaviorEncoder::load(encoder_path);
            const auto intents = IntentSpace::load(intents_path);
            TrainConfig cfg = s.train;
            cfg.num_intents = intents.count();
            if (no_inference && direct_kl) throw ConfigError("--no-inference-model and --direct-kl exclude each other");
            if (no_inference) cfg.variant = TrainingVariant::no_inference_model;
            if (direct_kl) cfg.variant = TrainingVariant::direct_kl;
            if (no_recloss) cfg.alpha_m = cfg.alpha_e = 0.0;
            if (no_augment) cfg.augment_factor = 0;
            if (trainable_intents) cfg.trainable_intents = true;
            auto text = make_text_encoder(s);
            TrainResult result;
            const auto bundle = train_bundle(l.split, l.dataset.catalog, encoder, intents, *text, cfg, &result);
            bundle.save(out);
            const auto hist = history_jsonl(result.history);
            if (!history_path.empty()) {
                write_file(history_path, hist);
            } else {
                std::cout << hist;
            }
            std::cerr << "model fingerprint " << bundle.fingerprint() << "\n";
        } else if (*one) {
            const auto l = load_dataset_dir(data);
            const auto rec = load_recommender(checkpoint, s, parse_rank_mode(mode_name));
            auto report = one_turn_eval(l.split, l.dataset.catalog, recommender_ranker(*rec), s.eval.ks,
                                        eval_users(l.split, s.eval.sample, eval_seed));
            report.config_fingerprint = rec->bundle().fingerprint();
            write_report(report, out, csv_path);
        } else if (*multi) {
            const auto l = load_dataset_dir(data);
            const auto catalog = std::make_shared<const Catalog>(l.dataset.catalog);
            const auto rec = load_recommender(checkpoint, s);
            const auto engine = make_engine(rec, catalog, s, s.eval.items_per_turn, s.eval.max_turns);
            MultiTurnOptions opt{s.eval.max_turns, s.eval.items_per_turn, s.eval.noise, eval_seed};
            auto report = multi_turn_eval(l.split, *catalog, engine_agents(*engine, parse_variant(variant_name)),
                                          opt, eval_users(l.split, s.eval.sample, eval_seed));
            report.config_fingerprint = rec->bundle().fingerprint();
            write_report(report, out, csv_path);
        } else if (*sw) {
            const auto l = load_dataset_dir(data);
            const auto grid = nlohmann::json::parse(read_file(grid_path));
            auto text = make_text_encoder(s);
            const BehaviorEncoder encoder =
                encoder_path.empty()
                    ? pretrain_encoder(l.split.train, catalog_ids(l.dataset.catalog), s.encoder).encoder
                    : BehaviorEncoder::load(encoder_path);
            const auto points = user_embeddings(l.split, encoder);
            const SweepPoint base{s.train.num_intents, s.train.lambda, s.train.alpha_m, s.train.alpha_e};
            const auto users = eval_users(l.split, s.eval.sample, eval_seed);
            const auto rows = sweep(expand_grid(grid, base), [&](const SweepPoint& p) {
                TrainConfig cfg = s.train;
                cfg.num_intents = p.num_intents;
                cfg.lambda = p.lambda;
                cfg.alpha_m = p.alpha_m;
                cfg.alpha_e = p.alpha_e;
                const auto km = fit_kmeans(points, p.num_intents, cfg.seed, s.intents.max_iters, 1e-6,
                                           s.intents.restarts);
                auto bundle = std::make_shared<const ModelBundle>(
                    train_bundle(l.split, l.dataset.catalog, encoder, km.space, *text, cfg));
                const Recommender rec(bundle, text);
                auto report = one_turn_eval(l.split, l.dataset.catalog, recommender_ranker(rec),
                                            s.eval.ks, users);
                report.config_fingerprint = bundle->fingerprint();
                std::cerr << "K=" << p.num_intents << " lambda=" << p.lambda << " alpha_m=" << p.alpha_m
                          << " alpha_e=" << p.alpha_e << " done\n";
                return report;
            });
            write_file(out, sweep_csv(rows));
        } else if (*warm) {
            const auto l = load_dataset_dir(data);
            s.text.cache_path = cache_path;
            auto text = make_text_encoder(s);
            std::vector<std::string> texts;
            for (const auto& item : l.dataset.catalog.items()) {
                texts.push_back(soft_description(item, l.dataset.catalog));
            }
            std::sort(texts.begin(), texts.end());
            texts.erase(std::unique(texts.begin(), texts.end()), texts.end());
            const auto rep = text->warm_cache(texts);
            std::cerr << "cached " << rep.written << " new embeddings, " << rep.failures.size()
                      << " failures\n";
            for (const auto& [t, err] : rep.failures) std::cerr << "  " << t << ": " << err << "\n";
            if (!rep.failures.empty()) return 1;
        } else if (*serve) {
            if (!checkpoint.empty()) s.service.checkpoint = checkpoint;
            if (!data.empty()) s.service.data_dir = data;
            if (!host.empty()) s.service.host = host;
            if (port >= 0) s.service.port = port;
            if (s.service.checkpoint.empty() || s.service.data_dir.empty()) {
                throw ConfigError("serve needs a checkpoint and a dataset directory");
            }
            Service service;
            const int bound = service.bind(s.service.host, s.service.port);
            if (bound < 0) throw std::runtime_error("cannot bind " + s.service.host + ":" + std::to_string(s.service.port));
            g_service = &service;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::thread loader([&] {
                try {
                    const auto l = load_dataset_dir(s.service.data_dir);
                    const auto rec = load_recommender(s.service.checkpoint, s);
                    auto engine = make_engine(rec, std::make_shared<const Catalog>(l.dataset.catalog), s,
                                              s.service.top_k, s.service.max_turns);
                    service.set_backend(engine, rec->bundle().fingerprint());
                    std::cerr << "model loaded, fingerprint " << rec->bundle().fingerprint() << "\n";
                } catch (const std::exception& e) {
                    std::cerr << "error: " << e.what() << "\n";
                    service.stop();
                }
            });
            std::cerr << "listening on " << s.service.host << ":" << bound << "\n";
            service.run();
            loader.join();
            g_service = nullptr;
        } else if (*sim) {
            const auto l = load_dataset_dir(data);
            const auto catalog = std::make_shared<const Catalog>(l.dataset.catalog);
            const auto rec = load_recommender(checkpoint, s);
            const auto engine = make_engine(rec, catalog, s, s.eval.items_per_turn, s.eval.max_turns);
            auto test = l.split.test.find(user_id);
            if (test == l.split.test.end()) throw LookupError("no test item for user '" + user_id + "'");
            std::vector<ItemId> history = l.split.train.at(user_id);
            history.push_back(l.split.valid.at(user_id));
            const auto user = SimulatedUser::make(catalog->by_id(test->second), *catalog, s.eval.max_turns,
                                                  eval_seed, s.eval.noise);
            EngineAgent agent(*engine, parse_variant(variant_name), history);
            const auto r = simulate_dialogue(user, agent, s.eval.max_turns, s.eval.items_per_turn);
            nlohmann::json turns = nlohmann::json::array();
            for (const auto& t : agent.session().transcript()) turns.push_back(to_json(t));
            nlohmann::json msgs = agent.session().messages();
            std::cout << nlohmann::json{{"user", user_id},
                                        {"target", r.target},
                                        {"success", r.success},
                                        {"turns_used", r.turns_used},
                                        {"messages", msgs},
                                        {"turns", turns}}
                             .dump(2)
                      << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
