#include "commands.hpp"

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "dstod/adapters.hpp"
#include "dstod/corpus_builder.hpp"
#include "dstod/downstream.hpp"
#include "dstod/error.hpp"
#include "dstod/grad_suite.hpp"
#include "dstod/neural/checkpoint.hpp"
#include "dstod/objectives.hpp"
#include "dstod/term_extraction.hpp"
#include "run_dir.hpp"

namespace dstod::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// -- shared options -----------------------------------------------------------

struct Common {
  std::uint64_t seed = 1;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "random seed")->capture_default_str();
  sub->add_option("--out", c.out, "parent of the run directory (default $DSTOD_DATA_ROOT/runs or ./runs)")
      ->configurable(false);
  sub->add_flag("--force", c.force, "rerun even if the run directory is complete")->configurable(false);
}

/// Numbers and booleans keep their type; everything else stays a string.
json typed(const std::string& s) {
  if (s.empty()) return s;
  const auto j = json::parse(s, nullptr, false);
  return j.is_number() || j.is_boolean() ? j : json(s);
}

/// Every configurable option of `sub`, as given or defaulted.
json options_json(const CLI::App* sub) {
  json j = json::object();
  for (const auto* opt : sub->get_options()) {
    if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_expected_max() > 1) {
        j[name] = json::array();
        for (const auto& v : res) j[name].push_back(typed(v));
      } else {
        j[name] = typed(res.back());
      }
    } else {
      j[name] = typed(opt->get_default_str());
    }
  }
  return j;
}

fs::path run_root(const Common& c) { return c.out.empty() ? default_run_root() : fs::path(c.out); }

/// Opens the run directory; returns nullopt (after saying so) when an
/// identical run already finished there.
std::optional<std::unique_ptr<RunDir>> open_run(const std::string& command, const CLI::App* sub, const Common& c,
                                                const std::map<std::string, fs::path>& inputs) {
  auto run = std::make_unique<RunDir>(run_root(c), command, options_json(sub), inputs);
  if (run->complete() && !c.force) {
    std::cout << run->path().string() << " (up to date)\n";
    return std::nullopt;
  }
  return run;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + p.string());
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
  if (!out) throw IoError("cannot write " + p.string());
}

std::map<std::string, std::string> parse_pairs(const std::vector<std::string>& items, const std::string& what) {
  std::map<std::string, std::string> out;
  for (const auto& s : items) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
      throw ValidationError(what + ": expected domain=path, got '" + s + "'");
    out[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return out;
}

// -- models ---------------------------------------------------------------------

/// A model directory: checkpoint manifest, tensors and vocab.json.
struct LoadedModel {
  Encoder<float> encoder;
  nn::Vocab vocab;
  json meta;
  std::optional<nn::ParameterStore<float>> head;
};

LoadedModel load_model(const fs::path& dir) {
  const auto man = nn::read_manifest(dir);
  LoadedModel m{nn::restore_encoder<float>(man.meta, nn::load_group<float>(dir, man, "encoder")),
                nn::Vocab::load(dir / "vocab.json"), man.meta, std::nullopt};
  const auto groups = man.groups();
  if (std::find(groups.begin(), groups.end(), "head") != groups.end()) m.head = nn::load_group<float>(dir, man, "head");
  return m;
}

void save_model(const fs::path& dir, const Encoder<float>& enc, const nn::Vocab& vocab, json extra = json::object(),
                const nn::ParameterStore<float>* head = nullptr) {
  auto meta = nn::encoder_meta(enc);
  meta.update(extra);
  std::vector<nn::StoreGroup<float>> groups{{"encoder", &enc.params()}};
  if (head) groups.push_back({"head", head});
  nn::save_checkpoint<float>(dir, head ? "model" : "encoder", meta, groups);
  vocab.save(dir / "vocab.json");
}

nn::TextCodec codec_for(const nn::Vocab& vocab, const nn::EncoderConfig& cfg) {
  return nn::TextCodec{&vocab, cfg.max_len, std::max(1, cfg.max_len / 2)};
}

// -- data -------------------------------------------------------------------------

/// A data directory holds train.jsonl, dev.jsonl, test.jsonl and ontology.json.
TaskData load_task_data(const fs::path& dir, const std::vector<std::string>& domains) {
  TaskData td;
  td.ontology = Ontology::load(dir / "ontology.json");
  td.domains = {domains.begin(), domains.end()};
  if (td.domains.empty()) throw ValidationError("--domains is empty");
  td.train = select_covering(load_dialogs(dir / "train.jsonl", &td.ontology), td.domains);
  td.dev = select_covering(load_dialogs(dir / "dev.jsonl", &td.ontology), td.domains);
  td.test = select_covering(load_dialogs(dir / "test.jsonl", &td.ontology), td.domains);
  return td;
}

struct FinetuneFlags {
  std::string task = "dst";
  int epochs = 300;
  int batch = 0;
  double lr = 5e-5;
  int patience = 10;
  std::size_t rr_pool = 100;
  std::size_t rr_negatives = 16;
  std::string mode = "dual_encoder_dot";
  bool train_adapters = false;
  bool freeze_base = false;
  double clip = 0.0;
  bool verbose = false;

  void add(CLI::App* sub) {
    sub->add_option("--task", task, "dst or rr")->check(CLI::IsMember({"dst", "rr"}))->capture_default_str();
    sub->add_option("--epochs", epochs)->capture_default_str();
    sub->add_option("--batch", batch, "0: 6 for DST, 24 for RR")->capture_default_str();
    sub->add_option("--lr", lr)->capture_default_str();
    sub->add_option("--patience", patience)->capture_default_str();
    sub->add_option("--rr-pool", rr_pool, "candidates per RR context, gold included")->capture_default_str();
    sub->add_option("--rr-negatives", rr_negatives, "sampled negatives per RR batch")->capture_default_str();
    sub->add_option("--score-mode", mode)->check(CLI::IsMember({"dual_encoder_dot", "linear_on_cls"}))
        ->capture_default_str();
    sub->add_flag("--train-adapters", train_adapters, "also train injected adapters");
    sub->add_flag("--freeze-base", freeze_base, "train heads, fusion and (optionally) adapters only");
    sub->add_option("--clip", clip, "global gradient-norm clip, 0 disables")->capture_default_str();
    sub->add_flag("--verbose", verbose, "per-epoch progress on stderr")->configurable(false);
  }

  FinetuneOptions options(std::uint64_t seed) const {
    FinetuneOptions o;
    o.epochs = epochs;
    o.batch = batch;
    o.lr = lr;
    o.patience = patience;
    o.seed = seed;
    o.rr_pool = rr_pool;
    o.rr_negatives = rr_negatives;
    o.mode = parse_score_mode(mode);
    o.train_adapters = train_adapters;
    o.freeze_base = freeze_base;
    o.clip_norm = clip;
    o.progress = verbose ? &std::cerr : nullptr;
    return o;
  }
};

struct ScheduleFlags {
  int epochs = 30;
  int batch = 32;
  std::vector<double> lrs = kLrGrid;
  int patience = 3;
  double dev_fraction = 0.05;
  double mask_prob = 0.15;
  double clip = 0.0;

  void add(CLI::App* sub, const std::string& prefix = "") {
    sub->add_option("--" + prefix + "epochs", epochs)->capture_default_str();
    sub->add_option("--" + prefix + "batch", batch)->capture_default_str();
    sub->add_option("--" + prefix + "lr", lrs, "learning rate, or several for a grid search")->capture_default_str();
    sub->add_option("--" + prefix + "patience", patience)->capture_default_str();
    sub->add_option("--" + prefix + "dev-fraction", dev_fraction)->capture_default_str();
    sub->add_option("--" + prefix + "mask-prob", mask_prob)->capture_default_str();
    sub->add_option("--" + prefix + "clip", clip)->capture_default_str();
  }

  Schedule schedule(std::uint64_t seed) const {
    Schedule s;
    s.epochs = epochs;
    s.batch = batch;
    s.lrs = lrs;
    s.patience = patience;
    s.dev_fraction = dev_fraction;
    s.mask_prob = mask_prob;
    s.seed = seed;
    s.clip_norm = clip;
    return s;
  }
};

Encoder<float> with_adapters(const Encoder<float>& base, const std::vector<std::string>& bank_dirs,
                             const std::string& compose) {
  if (bank_dirs.empty()) return base;
  std::vector<AdapterBank<float>> banks;
  for (const auto& d : bank_dirs) banks.push_back(load_bank<float>(resolve_input(d)));
  return inject(base, banks, nn::parse_compose(compose));
}

void save_reports(RunDir& run, const std::vector<EvalReport>& reports) {
  json arr = json::array();
  std::string tsv = EvalReport::tsv_header() + "\n";
  for (const auto& r : reports) {
    arr.push_back(r.to_json());
    tsv += r.tsv_row() + "\n";
  }
  write_json(run / "reports.json", arr);
  write_text(run / "reports.tsv", tsv);
}

// -- subcommands ----------------------------------------------------------------------

struct ExtractTerms {
  Common c;
  std::string dialogs, domain, exclude_file;
  std::size_t top_n = 80;
  std::vector<std::string> exclude;
  bool no_variants = false, no_backfill = false;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("extract-terms", "TF-IDF domain ngrams from single-domain dialogs");
    sub->add_option("--dialogs", dialogs, "dialogs (jsonl)")->required();
    sub->add_option("--domain", domain)->required();
    sub->add_option("--top-n", top_n)->capture_default_str();
    sub->add_option("--exclude", exclude, "ngrams to drop from the ranking");
    sub->add_option("--exclude-file", exclude_file, "one ngram per line to drop");
    sub->add_flag("--no-variants", no_variants, "skip American spelling variants");
    sub->add_flag("--no-backfill", no_backfill, "do not refill the list after exclusions");
    add_common(sub, c);
  }

  int run() {
    std::map<std::string, fs::path> in{{"dialogs", resolve_input(dialogs)}};
    if (!exclude_file.empty()) in["exclude"] = resolve_input(exclude_file);
    auto r = open_run("extract-terms", sub, c, in);
    if (!r) return 0;
    auto& run = **r;
    CurateOptions co;
    co.top_n = top_n;
    co.exclusion = exclude;
    co.backfill = !no_backfill;
    if (no_variants) co.variant_map.clear();
    if (!exclude_file.empty()) {
      std::ifstream ex(in["exclude"]);
      for (std::string line; std::getline(ex, line);)
        if (!line.empty()) co.exclusion.push_back(line);
    }
    const auto single = filter_single_domain(load_dialogs(in["dialogs"]), domain);
    if (single.empty()) throw ValidationError("no single-domain dialogs for domain '" + domain + "'");
    const auto terms = extract_domain_terms(single, domain, co);
    terms.save(run / "terms.json");
    if (terms.truncated) std::cerr << "warning: fewer than " << top_n << " ngrams available\n";
    run.finish();
    std::cout << (run / "terms.json").string() << '\n';
    return 0;
  }
};

struct BuildCorpus {
  Common cc_common, rd_common;
  std::string cc_terms, cc_input, rd_terms, rd_comments;
  std::size_t target = kDefaultCcTarget;
  CLI::App* cc = nullptr;
  CLI::App* rd = nullptr;

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("build-corpus", "domain corpora from a text dump or comment threads");
    sub->require_subcommand(1);
    cc = sub->add_subcommand("cc", "flat lines that mention a domain term");
    cc->add_option("--terms", cc_terms, "terms.json")->required();
    cc->add_option("--input", cc_input, "text dump, one document line per line")->required();
    cc->add_option("--target", target, "stop after this many lines")->capture_default_str();
    add_common(cc, cc_common);
    rd = sub->add_subcommand("reddit", "(context, response, false response) triples from threads");
    rd->add_option("--terms", rd_terms, "terms.json")->required();
    rd->add_option("--comments", rd_comments, "comments (jsonl)")->required();
    add_common(rd, rd_common);
  }

  int run_cc() {
    std::map<std::string, fs::path> in{{"terms", resolve_input(cc_terms)}, {"input", resolve_input(cc_input)}};
    auto r = open_run("build-corpus-cc", cc, cc_common, in);
    if (!r) return 0;
    auto& run = **r;
    std::ifstream dump(in["input"], std::ios::binary);
    CcStats stats;
    const auto lines = build_domain_cc(dump, DomainTermSet::load(in["terms"]), target, &stats);
    save_corpus(run / "corpus.jsonl", lines);
    write_json(run / "stats.json", {{"cleaning", stats.cleaning.to_json()},
                                    {"emitted", stats.emitted},
                                    {"target", stats.target},
                                    {"target_reached", stats.target_reached()}});
    run.finish();
    std::cout << (run / "corpus.jsonl").string() << '\n';
    return 0;
  }

  int run_reddit() {
    std::map<std::string, fs::path> in{{"terms", resolve_input(rd_terms)}, {"comments", resolve_input(rd_comments)}};
    auto r = open_run("build-corpus-reddit", rd, rd_common, in);
    if (!r) return 0;
    auto& run = **r;
    RedditStats stats;
    const auto triples =
        build_domain_reddit(load_thread_dump(in["comments"]), DomainTermSet::load(in["terms"]), rd_common.seed, &stats);
    save_triples(run / "triples.jsonl", triples);
    write_json(run / "stats.json", stats.to_json());
    run.finish();
    std::cout << (run / "triples.jsonl").string() << '\n';
    return 0;
  }
};

struct Pretrain {
  Common c;
  std::string objective = "rs-contrast", corpus, init, adapter_domain, mode = "dual_encoder_dot";
  int bottleneck = 48;
  int min_freq = 1;
  nn::EncoderConfig enc;
  ScheduleFlags sched;
  bool verbose = false;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("pretrain", "domain specialization: MLM, RS-Class or RS-Contrast");
    sub->add_option("--objective", objective)->check(CLI::IsMember({"mlm", "rs-class", "rs-contrast"}))
        ->capture_default_str();
    sub->add_option("--corpus", corpus, "corpus lines (mlm) or triples (rs-*), jsonl")->required();
    sub->add_option("--init", init, "model directory to start from (default: fresh encoder)");
    sub->add_option("--adapter-domain", adapter_domain, "train an adapter bank of this name on a frozen --init");
    sub->add_option("--bottleneck", bottleneck, "adapter size m")->capture_default_str();
    sub->add_option("--score-mode", mode)->check(CLI::IsMember({"dual_encoder_dot", "linear_on_cls"}))
        ->capture_default_str();
    sub->add_option("--min-freq", min_freq, "vocabulary cut-off for a fresh encoder")->capture_default_str();
    sub->add_option("--layers", enc.layers)->capture_default_str();
    sub->add_option("--hidden", enc.hidden)->capture_default_str();
    sub->add_option("--heads", enc.heads)->capture_default_str();
    sub->add_option("--ffn", enc.ffn)->capture_default_str();
    sub->add_option("--max-len", enc.max_len)->capture_default_str();
    sub->add_option("--dropout", enc.dropout)->capture_default_str();
    sched.add(sub);
    sub->add_flag("--verbose", verbose)->configurable(false);
    add_common(sub, c);
  }

  int run() {
    std::map<std::string, fs::path> in{{"corpus", resolve_input(corpus)}};
    if (!init.empty()) in["init"] = resolve_input(init);
    if (!adapter_domain.empty() && init.empty()) throw ValidationError("--adapter-domain needs --init");
    auto r = open_run("pretrain", sub, c, in);
    if (!r) return 0;
    auto& run = **r;
    const auto obj = parse_objective(objective);
    const auto schedule = sched.schedule(c.seed);
    std::vector<CorpusLine> lines;
    std::vector<DialogTriple> triples;
    std::vector<std::string> texts;
    if (obj == Objective::mlm) {
      lines = load_corpus(in["corpus"]);
      for (const auto& l : lines) texts.push_back(l.text);
    } else {
      triples = load_triples(in["corpus"]);
      for (const auto& t : triples) texts.insert(texts.end(), {t.context, t.response, t.false_response});
    }
    std::optional<LoadedModel> start;
    if (!init.empty()) start = load_model(in["init"]);
    nn::Vocab vocab = start ? start->vocab : nn::Vocab::build(texts, min_freq);
    nn::EncoderConfig cfg = enc;
    cfg.vocab_size = vocab.size();
    Encoder<float> model = start ? start->encoder : Encoder<float>(cfg, mix_seed(c.seed, 11));
    if (!adapter_domain.empty()) {
      AdapterConfig ac;
      ac.bottleneck = bottleneck;
      model = inject(model, {init_adapters<float>(model.config(), ac, adapter_domain, mix_seed(c.seed, 12))},
                     nn::Compose::single);
      freeze_base(model);
    }
    const auto codec = codec_for(vocab, model.config());
    const auto data = obj == Objective::mlm ? prepare_mlm(lines, schedule) : prepare_rs(obj, triples, schedule);
    auto res = specialize(model, data, codec, schedule, parse_score_mode(mode), verbose ? &std::cerr : nullptr);
    write_text(run / "train_log.txt", res.log_text());
    if (adapter_domain.empty()) {
      save_model(run / "model", res.model, vocab, {{"objective", objective}});
    } else {
      auto bank = extract_bank(res.model, adapter_domain);
      bank.provenance = {{"objective", objective}, {"seed", c.seed}, {"init_digest", digest_path(in["init"])}};
      save_bank(run / "bank", bank, res.model.config());
    }
    run.finish();
    std::cout << (run / (adapter_domain.empty() ? "model" : "bank")).string() << '\n';
    return 0;
  }
};

struct Finetune {
  Common c;
  std::string ckpt, data, compose = "single";
  std::vector<std::string> adapters, domains;
  FinetuneFlags ft;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("finetune", "fine-tune for DST or RR and report on the test split");
    sub->add_option("--ckpt", ckpt, "model directory")->required();
    sub->add_option("--adapters", adapters, "adapter bank directories to inject");
    sub->add_option("--compose", compose, "single, stack or fuse")->capture_default_str();
    sub->add_option("--data", data, "directory with train/dev/test.jsonl and ontology.json")->required();
    sub->add_option("--domains", domains, "dialogs touching any of these domains")->required();
    ft.add(sub);
    add_common(sub, c);
  }

  int run() {
    std::map<std::string, fs::path> in{{"ckpt", resolve_input(ckpt)}, {"data", resolve_input(data)}};
    for (std::size_t i = 0; i < adapters.size(); ++i) in["adapter" + std::to_string(i)] = resolve_input(adapters[i]);
    auto r = open_run("finetune", sub, c, in);
    if (!r) return 0;
    auto& run = **r;
    auto loaded = load_model(in["ckpt"]);
    const auto model = with_adapters(loaded.encoder, adapters, compose);
    const auto td = load_task_data(in["data"], domains);
    const auto codec = codec_for(loaded.vocab, model.config());
    const auto task = parse_task(ft.task);
    auto res = finetune(model, task, td, codec, ft.options(c.seed));
    json extra = {{"task", ft.task}, {"score_mode", ft.mode}};
    const nn::ParameterStore<float>* head = nullptr;
    if (res.dst_head) {
      extra["dst_head"] = res.dst_head->to_json();
      head = &res.dst_head->params();
    } else {
      head = &res.rr_head->params;
    }
    save_model(run / "model", res.model, loaded.vocab, extra, head);
    res.dev_report.label = "dev";
    save_reports(run, {res.report, res.dev_report});
    write_json(run / "dev_history.json", {{"dev", res.dev_history}, {"epochs_run", res.epochs_run}});
    run.finish();
    std::cout << res.report.tsv_row() << '\n';
    return 0;
  }
};

struct Evaluate {
  Common c;
  std::string model, data, split = "test";
  std::vector<std::string> domains;
  std::size_t rr_pool = 100;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("evaluate", "score a fine-tuned model on one split");
    sub->add_option("--model", model, "model directory written by finetune")->required();
    sub->add_option("--data", data, "directory with train/dev/test.jsonl and ontology.json")->required();
    sub->add_option("--domains", domains)->required();
    sub->add_option("--split", split)->check(CLI::IsMember({"train", "dev", "test"}))->capture_default_str();
    sub->add_option("--rr-pool", rr_pool)->capture_default_str();
    add_common(sub, c);
  }

  int run() {
    std::map<std::string, fs::path> in{{"model", resolve_input(model)}, {"data", resolve_input(data)}};
    auto r = open_run("evaluate", sub, c, in);
    if (!r) return 0;
    auto& run = **r;
    auto loaded = load_model(in["model"]);
    if (!loaded.head || !loaded.meta.contains("task")) throw ValidationError("model directory has no task head");
    const auto td = load_task_data(in["data"], domains);
    const auto& dialogs = split == "train" ? td.train : split == "dev" ? td.dev : td.test;
    const auto codec = codec_for(loaded.vocab, loaded.encoder.config());
    const auto task = parse_task(loaded.meta.at("task").get<std::string>());
    EvalReport rep;
    rep.task = to_string(task);
    rep.domains = {td.domains.begin(), td.domains.end()};
    rep.seed = c.seed;
    rep.config_digest = run.digest().substr(0, 16);
    rep.label = split;
    if (task == Task::dst) {
      const auto head = DstHead<float>::from_json(loaded.meta.at("dst_head"), *loaded.head);
      const auto turns = dst_turns(dialogs, head.slots());
      rep.metric = "jga";
      rep.value = evaluate_dst(loaded.encoder, head, codec, turns);
      rep.n_items = turns.size();
    } else {
      ScoringHead<float> head(parse_score_mode(loaded.meta.value("score_mode", "dual_encoder_dot")),
                              loaded.encoder.config().hidden, 0, "rr");
      nn::copy_matching(head.params, *loaded.head);
      const auto items = rr_items(dialogs, rr_pool, mix_seed(c.seed, 2));
      rep.metric = "R_" + std::to_string(rr_pool) + "@1";
      rep.value = evaluate_rr(loaded.encoder, head, codec, items);
      rep.n_items = items.size();
    }
    save_reports(run, {rep});
    run.finish();
    std::cout << rep.tsv_row() << '\n';
    return 0;
  }
};

struct FewShot {
  Common c;
  std::string ckpt, data, compose = "single";
  std::vector<std::string> adapters, domains;
  std::vector<double> percents = kFewShotPercents;
  FinetuneFlags ft;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("few-shot", "fine-tune on nested fractions of the training dialogs");
    sub->add_option("--ckpt", ckpt)->required();
    sub->add_option("--adapters", adapters);
    sub->add_option("--compose", compose)->capture_default_str();
    sub->add_option("--data", data)->required();
    sub->add_option("--domains", domains)->required();
    sub->add_option("--percents", percents)->capture_default_str();
    ft.add(sub);
    add_common(sub, c);
  }

  int run() {
    std::map<std::string, fs::path> in{{"ckpt", resolve_input(ckpt)}, {"data", resolve_input(data)}};
    for (std::size_t i = 0; i < adapters.size(); ++i) in["adapter" + std::to_string(i)] = resolve_input(adapters[i]);
    auto r = open_run("few-shot", sub, c, in);
    if (!r) return 0;
    auto& run = **r;
    auto loaded = load_model(in["ckpt"]);
    const auto model = with_adapters(loaded.encoder, adapters, compose);
    const auto td = load_task_data(in["data"], domains);
    const auto codec = codec_for(loaded.vocab, model.config());
    const auto reports = few_shot_curve(model, parse_task(ft.task), td, codec, ft.options(c.seed), percents);
    save_reports(run, reports);
    run.finish();
    for (const auto& rep : reports) std::cout << rep.tsv_row() << '\n';
    return 0;
  }
};

struct CrossDomain {
  Common c;
  std::string baseline, data;
  std::vector<std::string> specialized, targets;
  FinetuneFlags ft;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("cross-domain", "source-by-target transfer matrix");
    sub->add_option("--specialized", specialized, "domain=model-directory, one per source")->required();
    sub->add_option("--baseline", baseline, "unspecialized model directory")->required();
    sub->add_option("--data", data)->required();
    sub->add_option("--targets", targets, "target domains")->required();
    ft.add(sub);
    add_common(sub, c);
  }

  int run() {
    const auto spec = parse_pairs(specialized, "--specialized");
    std::map<std::string, fs::path> in{{"baseline", resolve_input(baseline)}, {"data", resolve_input(data)}};
    for (const auto& [d, p] : spec) in["specialized:" + d] = resolve_input(p);
    auto r = open_run("cross-domain", sub, c, in);
    if (!r) return 0;
    auto& run = **r;
    auto base = load_model(in["baseline"]);
    std::map<std::string, Encoder<float>> models;
    std::vector<std::string> sources;
    for (const auto& [d, p] : spec) {
      models.emplace(d, load_model(in["specialized:" + d]).encoder);
      sources.push_back(d);
    }
    std::map<std::string, TaskData> tds;
    for (const auto& t : targets) tds.emplace(t, load_task_data(in["data"], {t}));
    const auto codec = codec_for(base.vocab, base.encoder.config());
    const auto m = cross_domain_matrix(models, base.encoder, sources, tds, parse_task(ft.task), codec, ft.options(c.seed));
    write_json(run / "matrix.json", m.to_json());
    write_text(run / "matrix.tsv", m.tsv());
    run.finish();
    std::cout << m.tsv();
    return 0;
  }
};

struct MultiDomain {
  Common c;
  std::string base, data, variant = "fuse";
  std::vector<std::string> domains, banks, triples;
  ScheduleFlags spec;
  FinetuneFlags ft;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("multi-domain", "full multi-domain specialization vs stacked or fused adapters");
    sub->add_option("--base", base, "model directory")->required();
    sub->add_option("--domains", domains)->required();
    sub->add_option("--variant", variant)->check(CLI::IsMember({"full-ft", "stack", "fuse"}))->capture_default_str();
    sub->add_option("--banks", banks, "domain=bank-directory (stack, fuse)");
    sub->add_option("--triples", triples, "domain=triples.jsonl (full-ft)");
    sub->add_option("--data", data)->required();
    spec.add(sub, "spec-");
    ft.add(sub);
    add_common(sub, c);
  }

  int run() {
    const auto bank_dirs = parse_pairs(banks, "--banks");
    const auto triple_files = parse_pairs(triples, "--triples");
    std::map<std::string, fs::path> in{{"base", resolve_input(base)}, {"data", resolve_input(data)}};
    for (const auto& [d, p] : bank_dirs) in["bank:" + d] = resolve_input(p);
    for (const auto& [d, p] : triple_files) in["triples:" + d] = resolve_input(p);
    auto r = open_run("multi-domain", sub, c, in);
    if (!r) return 0;
    auto& run = **r;
    auto loaded = load_model(in["base"]);
    MultiDomainInputs<float> inputs;
    inputs.base = &loaded.encoder;
    for (const auto& [d, p] : bank_dirs) inputs.banks.emplace(d, load_bank<float>(in["bank:" + d]));
    for (const auto& [d, p] : triple_files) inputs.triples.emplace(d, load_triples(in["triples:" + d]));
    inputs.specialization = spec.schedule(c.seed);
    const auto td = load_task_data(in["data"], domains);
    const auto codec = codec_for(loaded.vocab, loaded.encoder.config());
    auto res = multi_domain_run(domains, parse_variant(variant), inputs, parse_task(ft.task), td, codec,
                                ft.options(c.seed));
    res.report.label = variant;
    res.dev_report.label = variant + "/dev";
    save_reports(run, {res.report, res.dev_report});
    run.finish();
    std::cout << res.report.tsv_row() << '\n';
    return 0;
  }
};

struct GradCheck {
  Common c;
  GradSuiteOptions o;
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("grad-check", "finite-difference check of every parameter group (double precision)");
    sub->add_option("--layers", o.layers)->capture_default_str();
    sub->add_option("--hidden", o.hidden)->capture_default_str();
    sub->add_option("--bottleneck", o.bottleneck)->capture_default_str();
    sub->add_option("--step", o.check.step)->capture_default_str();
    sub->add_option("--tolerance", o.check.tolerance)->capture_default_str();
    sub->add_option("--max-entries", o.check.max_entries, "sampled entries per tensor")->capture_default_str();
    sub->add_option("--corrupt", o.check.corrupt_tensor, "perturb this tensor's analytic gradient (test hook)");
    add_common(sub, c);
  }

  int run() {
    auto r = open_run("grad-check", sub, c, {});
    if (!r) return 0;
    auto& run = **r;
    o.check.seed = c.seed;
    const auto rep = run_grad_suite(o);
    write_json(run / "report.json", rep.to_json());
    std::ostringstream tsv;
    tsv << "group\ttensor\tfrozen\tchecked\trel_error\tmax_abs_error\tpassed\n";
    for (const auto& row : rep.rows)
      tsv << row.group << '\t' << row.tensor << '\t' << row.frozen << '\t' << row.checked << '\t' << row.rel_error
          << '\t' << row.max_abs_error << '\t' << row.passed << '\n';
    write_text(run / "report.tsv", tsv.str());
    // a failing run stays incomplete so a rerun checks again
    if (rep.passed()) run.finish();
    for (const auto& [g, ok] : rep.group_passed)
      std::cout << g << '\t' << (ok ? "pass" : "FAIL") << '\t' << rep.max_rel_error.at(g) << '\n';
    if (rep.passed()) return 0;
    std::cerr << "gradient check failed:";
    for (const auto& row : rep.rows)
      if (!row.passed) std::cerr << ' ' << row.group << '/' << row.tensor;
    std::cerr << '\n';
    return 1;
  }
};

struct Report {
  std::vector<std::string> runs;
  std::string format = "tsv";
  CLI::App* sub = nullptr;

  void add(CLI::App& app) {
    sub = app.add_subcommand("report", "collect evaluation reports from run directories (read-only)");
    sub->add_option("runs", runs, "run directories or reports.json files")->required();
    sub->add_option("--format", format)->check(CLI::IsMember({"json", "tsv"}))->capture_default_str();
  }

  int run() {
    std::vector<EvalReport> all;
    for (const auto& r : runs) {
      auto p = resolve_input(r);
      if (fs::is_directory(p)) p /= "reports.json";
      std::ifstream f(p);
      if (!f) throw IoError("cannot read " + p.string());
      json j;
      try {
        j = json::parse(f);
      } catch (const json::exception& e) {
        throw ParseError(p.string(), 1, e.what());
      }
      for (const auto& item : j.is_array() ? j : json::array({j})) all.push_back(EvalReport::from_json(item));
    }
    if (format == "json") {
      json arr = json::array();
      for (const auto& r : all) arr.push_back(r.to_json());
      std::cout << arr.dump(2) << '\n';
    } else {
      std::cout << EvalReport::tsv_header() << '\n';
      for (const auto& r : all) std::cout << r.tsv_row() << '\n';
    }
    return 0;
  }
};

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal";
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Domain specialization toolkit for task-oriented dialog encoders", "dstod"};
  app.require_subcommand(1);
  // --config may follow the subcommand; its keys apply to that subcommand
  app.fallthrough();
  app.set_config("--config", "", "JSON config file; flags given on the command line win");
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  ExtractTerms extract;
  BuildCorpus build;
  Pretrain pretrain;
  Finetune fine;
  Evaluate evaluate;
  FewShot few;
  CrossDomain cross;
  MultiDomain multi;
  GradCheck grad;
  Report report;
  extract.add(app);
  build.add(app);
  pretrain.add(app);
  fine.add(app);
  evaluate.add(app);
  few.add(app);
  cross.add(app);
  multi.add(app);
  grad.add(app);
  report.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    if (extract.sub->parsed()) return extract.run();
    if (build.cc->parsed()) return build.run_cc();
    if (build.rd->parsed()) return build.run_reddit();
    if (pretrain.sub->parsed()) return pretrain.run();
    if (fine.sub->parsed()) return fine.run();
    if (evaluate.sub->parsed()) return evaluate.run();
    if (few.sub->parsed()) return few.run();
    if (cross.sub->parsed()) return cross.run();
    if (multi.sub->parsed()) return multi.run();
    if (grad.sub->parsed()) return grad.run();
    if (report.sub->parsed()) return report.run();
  } catch (const std::exception& e) {
    std::cerr << json{{"error", error_kind(e)}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dstod::cli
