#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <httplib.h>

#include "exameval/answering.hpp"
#include "exameval/io.hpp"
#include "exameval/llmgate.hpp"
#include "exameval/parallel.hpp"
#include "exameval/rng.hpp"

namespace exameval {

// ---------------------------------------------------------------------------
// Question-type taxonomy
// ---------------------------------------------------------------------------

struct QuestionType {
    const char* key;
    const char* label;
};

inline const std::vector<QuestionType>& question_types() {
    static const std::vector<QuestionType> types = {
        {"classification", "Classification"},
        {"fill_in_the_blank", "Fill-in-the-blank"},
        {"sequence", "Sequence"},
        {"text_comprehension", "Text comprehension"},
        {"argumentation", "Argumentation"},
        {"matching", "Matching"},
        {"extension", "Extension"},
        {"explanatory", "Explanatory"},
        {"rule_extraction", "Rule extraction"},
        {"comparison", "Comparison"},
        {"question_generation", "Question generation"},
        {"translation", "Translation"},
        {"comprehension_and_commentary", "Comprehension and commentary"},
        {"accounting_and_booking", "Accounting and booking"},
        {"framework_analysis", "Framework analysis"},
        {"correction", "Correction"},
        {"source_identification", "Source identification"},
        {"supplementary_optimization", "Supplementary optimization"},
    };
    return types;
}

inline constexpr const char* kFallbackQuestionType = "text_comprehension";

/// Maps a key or label (any case, spaces/hyphens/underscores alike) to the
/// taxonomy key.
inline std::optional<std::string> question_type_key(std::string_view s) {
    auto squash = [](std::string_view in) {
        std::string out;
        for (char c : in) {
            const auto u = static_cast<unsigned char>(c);
            if (std::isalnum(u)) out += static_cast<char>(std::tolower(u));
        }
        return out;
    };
    std::string target = squash(s);
    for (const char* suffix : {"tasks", "task"})
        if (target.size() > std::strlen(suffix) && target.ends_with(suffix)) {
            target.resize(target.size() - std::strlen(suffix));
            break;
        }
    for (const auto& t : question_types())
        if (squash(t.key) == target || squash(t.label) == target) return std::string(t.key);
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Tokens and chunks
// ---------------------------------------------------------------------------

/// Pluggable token counter. Must be monotone in prefix length.
struct TokenCounter {
    std::string name;
    std::function<std::size_t(std::string_view)> count;
};

/// ceil(bytes / 4), the documented default heuristic.
inline TokenCounter bytes_per_4_counter() {
    return {"bytes/4", [](std::string_view s) { return (s.size() + 3) / 4; }};
}

/// Longest prefix (cut at a UTF-8 boundary) that fits in `max_tokens`.
inline std::string truncate_to_tokens(std::string_view text, std::size_t max_tokens, const TokenCounter& counter) {
    if (counter.count(text) <= max_tokens) return std::string(text);
    std::size_t lo = 0, hi = text.size();
    while (lo < hi) {
        const std::size_t mid = (lo + hi + 1) / 2;
        if (counter.count(text.substr(0, mid)) <= max_tokens) lo = mid;
        else hi = mid - 1;
    }
    while (lo > 0 && lo < text.size() && (static_cast<unsigned char>(text[lo]) & 0xC0) == 0x80) --lo;
    return std::string(text.substr(0, lo));
}

struct Chunk {
    std::string text;
    std::size_t token_count = 0;
    double similarity = 0;
    std::string source_url;
};

/// Splits a document into whitespace-delimited chunks of at most
/// `chunk_tokens` tokens each (a single oversized word is cut).
inline std::vector<Chunk> segment_document(std::string_view text, const std::string& url, std::size_t chunk_tokens,
                                           const TokenCounter& counter) {
    std::vector<Chunk> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(Chunk{cur, counter.count(cur), 0, url});
        cur.clear();
    };
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j == i) break;
        std::string word(text.substr(i, j - i));
        i = j;
        const std::string candidate = cur.empty() ? word : cur + " " + word;
        if (counter.count(candidate) <= chunk_tokens) {
            cur = candidate;
            continue;
        }
        flush();
        while (counter.count(word) > chunk_tokens) {
            std::string head = truncate_to_tokens(word, chunk_tokens, counter);
            if (head.empty()) head = word.substr(0, 1);
            out.push_back(Chunk{head, counter.count(head), 0, url});
            word.erase(0, head.size());
        }
        cur = word;
    }
    flush();
    return out;
}

// ---------------------------------------------------------------------------
// Query construction
// ---------------------------------------------------------------------------

struct SearchQuery {
    std::string text;
    bool used_fallback = false;
    bool generation_failed = false;  // a query model was configured but failed
};

namespace detail {

inline const std::set<std::string>& stopwords() {
    static const std::set<std::string> words = {
        "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "in", "is", "it", "of", "on",
        "or", "that", "the", "this", "to", "was", "what", "which", "with", "der", "die", "das", "den", "dem",
        "des", "ein", "eine", "einen", "einem", "einer", "eines", "und", "oder", "ist", "sind", "war", "wird",
        "werden", "wurde", "zu", "zum", "zur", "im", "in", "mit", "von", "vom", "auf", "für", "an", "am", "als",
        "bei", "es", "er", "sie", "wie", "was", "welche", "welcher", "welches", "nicht", "auch", "sich", "dass",
        "hat", "haben", "kann", "können", "sein", "seine", "ihr", "ihre", "aus", "nach", "so", "um"};
    return words;
}

}  // namespace detail

/// Deterministic fallback: lower-cased content words in order of first
/// appearance, stopwords dropped, cut to `max_tokens`.
inline std::string keyword_query(std::string_view question, std::size_t max_tokens, const TokenCounter& counter) {
    std::vector<std::string> words;
    std::set<std::string> seen;
    std::string cur;
    auto push = [&] {
        if (cur.size() >= 2 && !detail::stopwords().count(cur) && seen.insert(cur).second) words.push_back(cur);
        cur.clear();
    };
    for (char c : question) {
        const auto u = static_cast<unsigned char>(c);
        if (u >= 0x80 || std::isalnum(u) || c == '%' || c == '-') cur += u < 0x80 ? static_cast<char>(std::tolower(u)) : c;
        else push();
    }
    push();
    std::string q;
    for (const auto& w : words) {
        const std::string next = q.empty() ? w : q + " " + w;
        if (counter.count(next) > max_tokens) break;
        q = next;
    }
    if (q.empty() && !words.empty()) q = truncate_to_tokens(words.front(), max_tokens, counter);
    return q;
}

inline constexpr const char* kQueryPromptHeader = "### SEARCH QUERY REQUEST";

/// Query from the optional query model, else the keyword fallback.
inline SearchQuery make_query(std::string_view question, ChatClient* querygen, std::size_t max_tokens = 32,
                              const TokenCounter& counter = bytes_per_4_counter()) {
    if (trim(question).empty()) throw InputError("make_query: empty question");
    SearchQuery out;
    if (querygen) {
        try {
            const std::string prompt = std::string(kQueryPromptHeader) +
                                       "\nWrite one short web search query (a few keywords, no explanation) "
                                       "for researching this question:\n\n" +
                                       std::string(question);
            const auto ex = querygen->complete(ChatPrompt{querygen->config().system_prompt, prompt});
            std::string text = strip_reasoning(ex.response_text, TracePolicy{querygen->config().trace_delimiters}).final_text;
            text = std::string(trim(text.substr(0, text.find('\n'))));
            text = std::string(trim(truncate_to_tokens(text, max_tokens, counter)));
            if (!text.empty()) {
                out.text = text;
                return out;
            }
        } catch (const Error&) {
        }
        out.generation_failed = true;
    }
    out.used_fallback = true;
    out.text = keyword_query(question, max_tokens, counter);
    if (out.text.empty()) out.text = truncate_to_tokens(trim(question), max_tokens, counter);
    return out;
}

// ---------------------------------------------------------------------------
// Similarity ranking and context packing
// ---------------------------------------------------------------------------

/// Cosine similarity; nullopt when either vector has zero norm.
inline std::optional<double> cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw InputError(fmt::format("embedding dimensions differ: {} vs {}", a.size(), b.size()));
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return std::nullopt;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Sets similarity on each chunk and returns them in descending order; ties
/// keep retrieval order. Zero-norm chunks are dropped with a warning.
inline std::vector<Chunk> rank_chunks(std::vector<Chunk> chunks, const std::vector<std::vector<double>>& chunk_embeddings,
                                      const std::vector<double>& query_embedding,
                                      std::vector<std::string>* warnings = nullptr) {
    if (chunks.size() != chunk_embeddings.size()) throw InputError("rank_chunks: one embedding per chunk required");
    double qn = 0;
    for (double x : query_embedding) qn += x * x;
    if (qn == 0) throw InputError("rank_chunks: query embedding has zero norm");
    std::vector<Chunk> kept;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        const auto sim = cosine(chunk_embeddings[i], query_embedding);
        if (!sim) {
            if (warnings) warnings->push_back(fmt::format("chunk {} from {} has a zero-norm embedding; dropped", i,
                                                          chunks[i].source_url));
            continue;
        }
        chunks[i].similarity = *sim;
        kept.push_back(std::move(chunks[i]));
    }
    std::stable_sort(kept.begin(), kept.end(), [](const Chunk& a, const Chunk& b) { return a.similarity > b.similarity; });
    return kept;
}

struct PackedContext {
    std::string context;
    std::vector<Chunk> used;
    bool truncated_last = false;
    std::size_t total_tokens = 0;
};

inline constexpr const char* kChunkSeparator = "\n\n";

/// Greedy packing in rank order: whole chunks while the running total stays
/// within N; the first chunk that would overflow is cut to the remaining
/// budget and packing stops.
inline PackedContext pack_context(const std::vector<Chunk>& ranked, std::size_t N,
                                  const TokenCounter& counter = bytes_per_4_counter()) {
    if (N < 1) throw InputError("pack_context: N must be >= 1");
    PackedContext p;
    for (const auto& c : ranked) {
        if (c.token_count == 0) continue;
        if (p.total_tokens + c.token_count <= N) {
            p.used.push_back(c);
            p.total_tokens += c.token_count;
            continue;
        }
        const std::size_t room = N - p.total_tokens;
        if (room > 0) {
            Chunk cut = c;
            cut.text = truncate_to_tokens(c.text, room, counter);
            cut.token_count = counter.count(cut.text);
            if (!cut.text.empty() && cut.token_count <= room) {
                p.total_tokens += cut.token_count;
                p.used.push_back(std::move(cut));
                p.truncated_last = true;
            }
        }
        break;
    }
    for (std::size_t i = 0; i < p.used.size(); ++i) {
        if (i) p.context += kChunkSeparator;
        p.context += p.used[i].text;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Retrieval and embedding services
// ---------------------------------------------------------------------------

struct RetrievedDoc {
    std::string url;
    std::string content;
};

class Retriever {
public:
    virtual ~Retriever() = default;
    virtual std::vector<RetrievedDoc> search(const std::string& query) = 0;
};

namespace detail {

inline std::vector<RetrievedDoc> docs_from_json(const json& arr) {
    std::vector<RetrievedDoc> out;
    if (!arr.is_array()) return out;
    for (const auto& r : arr)
        out.push_back(RetrievedDoc{r.value("url", std::string{}), r.value("content", std::string{})});
    return out;
}

}  // namespace detail

/// SearXNG-compatible meta-search: GET {base}/search?q=...&format=json.
class SearxngRetriever : public Retriever {
public:
    explicit SearxngRetriever(const std::string& base_url, double timeout_s = 30)
        : url_(split_url(base_url)), timeout_s_(timeout_s) {}

    std::vector<RetrievedDoc> search(const std::string& query) override {
        httplib::Client cli(url_.scheme_host_port);
        cli.set_read_timeout(static_cast<time_t>(timeout_s_), 0);
        cli.set_connection_timeout(static_cast<time_t>(timeout_s_), 0);
        const httplib::Params params{{"q", query}, {"format", "json"}};
        auto res = cli.Get(url_.path_prefix + "/search", params, httplib::Headers{});
        if (!res) throw TransportError("search endpoint unreachable: " + httplib::to_string(res.error()), 0);
        if (res->status != 200)
            throw TransportError("search endpoint returned HTTP " + std::to_string(res->status), res->status);
        try {
            return detail::docs_from_json(json::parse(res->body).at("results"));
        } catch (const json::exception& e) {
            throw ProtocolError(std::string("malformed search response: ") + e.what());
        }
    }

private:
    ParsedUrl url_;
    double timeout_s_;
};

/// Canned results: {"queries": {"<query>": [...]}, "rules": [{"contains": [..], "results": [..]}],
/// "default": [...]} with each result {"url", "content"}.
class CannedRetriever : public Retriever {
public:
    explicit CannedRetriever(json doc) : doc_(std::move(doc)) {
        if (!doc_.is_object()) throw ConfigError("canned retrieval file must be a JSON object");
    }
    static CannedRetriever load(const std::filesystem::path& path) {
        try {
            return CannedRetriever(json::parse(read_file(path)));
        } catch (const json::parse_error& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    }

    std::vector<RetrievedDoc> search(const std::string& query) override {
        if (auto q = doc_.find("queries"); q != doc_.end() && q->contains(query))
            return detail::docs_from_json((*q)[query]);
        for (const auto& rule : doc_.value("rules", json::array())) {
            bool all = true;
            for (const auto& s : rule.value("contains", json::array()))
                if (query.find(s.get<std::string>()) == std::string::npos) all = false;
            if (all) return detail::docs_from_json(rule.value("results", json::array()));
        }
        return detail::docs_from_json(doc_.value("default", json::array()));
    }

private:
    json doc_;
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string name() const = 0;
    virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) = 0;
};

class HashEmbedder : public Embedder {
public:
    explicit HashEmbedder(std::size_t dim = 64) : dim_(dim) {}
    std::string name() const override { return fmt::format("hash-{}", dim_); }
    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
        std::vector<std::vector<double>> out;
        for (const auto& t : texts) out.push_back(hash_embedding(t, dim_));
        return out;
    }

private:
    std::size_t dim_;
};

/// OpenAI-compatible POST /embeddings. The dimension of the first response
/// is pinned; later responses must match it.
class EndpointEmbedder : public Embedder {
public:
    explicit EndpointEmbedder(ModelConfig cfg)
        : cfg_(std::move(cfg)), transport_(ChatClient::make_transport(cfg_)) {}
    EndpointEmbedder(ModelConfig cfg, std::shared_ptr<ChatTransport> transport)
        : cfg_(std::move(cfg)), transport_(std::move(transport)) {}

    std::string name() const override { return cfg_.name; }

    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
        const std::string body = json{{"model", cfg_.model_id()}, {"input", texts}}.dump();
        HttpReply reply;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            reply = transport_->post_json("/embeddings", body);
            if (reply.status != 0 && reply.status < 500) break;
        }
        if (reply.status != 200)
            throw TransportError(fmt::format("embeddings endpoint '{}' failed: HTTP {}", cfg_.name, reply.status),
                                 reply.status);
        std::vector<std::vector<double>> out;
        try {
            const json j = json::parse(reply.body);
            for (const auto& d : j.at("data")) out.push_back(d.at("embedding").get<std::vector<double>>());
        } catch (const json::exception& e) {
            throw ProtocolError(std::string("malformed embeddings response: ") + e.what());
        }
        if (out.size() != texts.size()) throw ProtocolError("embeddings response has the wrong number of vectors");
        std::lock_guard lk(mu_);
        for (const auto& v : out) {
            if (dim_ == 0) dim_ = v.size();
            if (v.size() != dim_)
                throw ProtocolError(fmt::format("embedding dimension {} differs from {}", v.size(), dim_));
        }
        return out;
    }

private:
    ModelConfig cfg_;
    std::shared_ptr<ChatTransport> transport_;
    std::mutex mu_;
    std::size_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// Generation, gating, diversification
// ---------------------------------------------------------------------------

struct FountainTuple {
    std::string id;
    std::string question;
    std::string answer;
    std::string context;
    int source_count = 0;
    std::string question_type = kFallbackQuestionType;
    int generation = 0;
    std::optional<std::string> parent_id;
};

inline json to_json(const FountainTuple& t) {
    return {{"id", t.id},
            {"question", t.question},
            {"answer", t.answer},
            {"context", t.context},
            {"source_count", t.source_count},
            {"question_type", t.question_type},
            {"generation", t.generation},
            {"parent_id", t.parent_id ? json(*t.parent_id) : json(nullptr)}};
}

inline FountainTuple fountain_tuple_from_json(const json& j) {
    try {
        FountainTuple t;
        t.id = j.value("id", std::string{});
        t.question = j.at("question").get<std::string>();
        t.answer = j.value("answer", std::string{});
        t.context = j.value("context", std::string{});
        t.source_count = j.value("source_count", 0);
        t.question_type = j.value("question_type", std::string(kFallbackQuestionType));
        t.generation = j.value("generation", 0);
        if (j.contains("parent_id") && !j["parent_id"].is_null()) t.parent_id = j["parent_id"].get<std::string>();
        if (t.source_count < 0 || t.generation < 0) throw InputError("negative source_count or generation");
        return t;
    } catch (const json::exception& e) {
        throw InputError(std::string("fountain tuple: ") + e.what());
    }
}

inline void save_tuples(const std::vector<FountainTuple>& ts, const std::filesystem::path& path) {
    std::vector<json> rows;
    for (const auto& t : ts) rows.push_back(to_json(t));
    write_file(path, to_jsonl(rows));
}

inline std::vector<FountainTuple> load_tuples(const std::filesystem::path& path) {
    std::vector<FountainTuple> out;
    for (const auto& j : read_jsonl(path)) out.push_back(fountain_tuple_from_json(j));
    return out;
}

inline constexpr const char* kDefaultFlag = "INSUFFICIENT_CONTEXT";

/// f(A) = 1 iff the answer equals or contains the flag (case and
/// whitespace normalized).
inline bool is_flagged(std::string_view answer, std::string_view flag) {
    const std::string f = normalize_text(flag);
    return !f.empty() && normalize_text(answer).find(f) != std::string::npos;
}

inline bool is_exact_flag(std::string_view answer, std::string_view flag) {
    return normalize_text(answer) == normalize_text(flag);
}

inline constexpr const char* kAnswerPromptHeader = "### CONTEXT";
inline constexpr const char* kDiversifyPromptHeader = "### DIVERSIFY";

inline std::string build_answer_prompt_text(std::string_view context, std::string_view question, std::string_view flag) {
    return fmt::format("{}\n{}\n\n### QUESTION\n{}\n\n### INSTRUCTIONS\nAnswer the question using only the context "
                       "above. If the context does not support a valid answer, reply with exactly: {}",
                       kAnswerPromptHeader, context, question, flag);
}

struct GatedAnswer {
    std::optional<std::string> answer;
    bool insufficient = false;
    bool transport_failed = false;
    std::string error;
};

inline GatedAnswer generate_gated(std::string_view context, std::string_view question, ChatClient& gen,
                                  std::string_view flag) {
    GatedAnswer g;
    try {
        const auto ex = gen.complete(ChatPrompt{gen.config().system_prompt, build_answer_prompt_text(context, question, flag)});
        const auto s = strip_reasoning(ex.response_text, TracePolicy{gen.config().trace_delimiters});
        if (is_flagged(s.final_text, flag)) g.insufficient = true;
        else if (s.truncated || trim(s.final_text).empty()) g.insufficient = true;
        else g.answer = std::string(trim(s.final_text));
    } catch (const Error& e) {
        g.transport_failed = true;
        g.error = e.what();
    }
    return g;
}

struct ChildQuestion {
    std::string text;
    std::string question_type;
};

inline std::string build_diversify_prompt_text(std::string_view context, std::string_view question,
                                               const std::vector<std::string>& types) {
    std::string list;
    for (std::size_t i = 0; i < types.size(); ++i)
        list += fmt::format("Q{}: [{}]\n", i + 1, types[i]);
    return fmt::format("{}\n### CONTEXT\n{}\n\n### SOURCE QUESTION\n{}\n\n### TASK\nWrite {} new, thematically "
                       "different questions that the context can answer. One per line, formatted as\n"
                       "Q<n>: [<type>] <question>\nusing these types in order:\n{}",
                       kDiversifyPromptHeader, context, question, types.size(), list);
}

/// Parses "Q<n>: [type] text" lines (the bracketed type is optional). Each
/// child takes the requested type for its position, else the tag, else the
/// fallback type.
inline std::vector<ChildQuestion> parse_children(std::string_view reply, std::size_t k,
                                                 const std::vector<std::string>& requested) {
    static const std::regex line_re(R"(^\s*Q\s*(\d+)\s*[:.)]\s*(?:\[([^\]]*)\])?\s*(.*?)\s*$)");
    std::vector<ChildQuestion> out;
    std::size_t start = 0;
    while (start <= reply.size() && out.size() < k) {
        std::size_t end = reply.find('\n', start);
        if (end == std::string_view::npos) end = reply.size();
        const std::string line(reply.substr(start, end - start));
        start = end + 1;
        std::smatch m;
        if (!std::regex_match(line, m, line_re) || m[3].str().empty()) continue;
        ChildQuestion c;
        c.text = m[3].str();
        const std::size_t pos = out.size();
        if (pos < requested.size()) c.question_type = requested[pos];
        else if (auto key = question_type_key(m[2].str())) c.question_type = *key;
        else c.question_type = kFallbackQuestionType;
        out.push_back(std::move(c));
    }
    return out;
}

struct Diversified {
    std::vector<ChildQuestion> children;
    std::size_t shortfall = 0;
    bool failed = false;
};

inline Diversified diversify(std::string_view question, std::string_view context, std::size_t k, ChatClient& gen,
                             Rng& rng) {
    std::vector<std::string> types;
    for (std::size_t i = 0; i < k; ++i) types.push_back(question_types()[rng.below(question_types().size())].key);
    Diversified d;
    try {
        const auto ex = gen.complete(ChatPrompt{gen.config().system_prompt, build_diversify_prompt_text(context, question, types)});
        const auto s = strip_reasoning(ex.response_text, TracePolicy{gen.config().trace_delimiters});
        d.children = parse_children(s.final_text, k, types);
    } catch (const Error&) {
        d.failed = true;
    }
    d.shortfall = k - d.children.size();
    return d;
}

// ---------------------------------------------------------------------------
// Cleansing
// ---------------------------------------------------------------------------

struct CleansingReport {
    std::size_t input = 0;
    std::size_t duplicates = 0;        // stage 1
    std::size_t seed_overlaps = 0;     // stage 1
    std::size_t flag_exact = 0;        // stage 2
    std::size_t flag_partial = 0;      // stage 3
    std::size_t few_sources = 0;       // stage 4
    std::size_t kept = 0;
    int s_min = 3;
    // Sub-counts inside a combined stage may be unknown (imported ledgers).
    bool context_breakdown_known = true;

    std::size_t stage1() const { return duplicates + seed_overlaps; }
    std::size_t context_based() const { return flag_partial + few_sources; }
    std::size_t removed() const { return stage1() + flag_exact + context_based(); }
};

struct CleanseResult {
    std::vector<FountainTuple> kept;
    CleansingReport report;
};

/// Four ordered stages: duplicates and seed overlaps, exact-flag answers,
/// partial-flag answers, too few sources. Seed tuples themselves
/// (generation 0) are kept; later tuples repeating a seed question go.
inline CleanseResult cleanse(const std::vector<FountainTuple>& dataset, const std::vector<std::string>& seeds,
                             std::string_view flag, int s_min) {
    CleanseResult r;
    r.report.input = dataset.size();
    r.report.s_min = s_min;
    std::set<std::string> seed_norm;
    for (const auto& s : seeds) seed_norm.insert(normalize_text(s));

    std::vector<FountainTuple> s1;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& t : dataset) {
        const std::string nq = normalize_text(t.question);
        if (!seen.insert({nq, normalize_text(t.answer)}).second) {
            ++r.report.duplicates;
            continue;
        }
        if (t.generation > 0 && seed_norm.count(nq)) {
            ++r.report.seed_overlaps;
            continue;
        }
        s1.push_back(t);
    }
    std::vector<FountainTuple> s2;
    for (auto& t : s1) {
        if (is_exact_flag(t.answer, flag)) ++r.report.flag_exact;
        else s2.push_back(std::move(t));
    }
    std::vector<FountainTuple> s3;
    for (auto& t : s2) {
        if (is_flagged(t.answer, flag)) ++r.report.flag_partial;
        else s3.push_back(std::move(t));
    }
    for (auto& t : s3) {
        if (t.source_count < s_min) ++r.report.few_sources;
        else r.kept.push_back(std::move(t));
    }
    r.report.kept = r.kept.size();
    return r;
}

inline std::string group_thousands(std::size_t n) {
    std::string digits = std::to_string(n), out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
        out += digits[i];
    }
    return out;
}

/// Category / Instances / Description table with the final tally.
inline std::string cleansing_report_markdown(const CleansingReport& r, std::string_view flag) {
    const std::string na = "N/A";
    auto n = [](std::size_t v) { return group_thousands(v); };
    std::string out = "| Category | Instances | Description |\n|---|---|---|\n";
    out += "| **Initial data cleansing** | | |\n";
    out += fmt::format("| Exact duplicates removed | {} | Duplicate tuples and repeats of seed questions. |\n", n(r.stage1()));
    out += "| **Exact flag-based exclusion** | | |\n";
    out += fmt::format("| Flagged answers (exact match) | {} | Answer is only the flag string (\"{}\"). |\n",
                       n(r.flag_exact), flag);
    out += "| **Context-based filtering** | | |\n";
    out += fmt::format("| Total excluded (context-based filtering) | {} | Partial flag matches plus insufficient sources. |\n",
                       n(r.context_based()));
    out += fmt::format("| Flagged answers (partial match) | {} | Flag string occurs inside a longer answer. |\n",
                       r.context_breakdown_known ? n(r.flag_partial) : na);
    out += fmt::format("| Insufficient retrieved sources | {} | Fewer than {} retrieved sources. |\n",
                       r.context_breakdown_known ? n(r.few_sources) : na, r.s_min);
    out += fmt::format("\nRemoved {} of {} tuples; {} kept.\n", n(r.removed()), n(r.input), n(r.kept));
    return out;
}

inline json to_json(const CleansingReport& r) {
    json j = {{"input", r.input},
              {"stage1_duplicates", r.duplicates},
              {"stage1_seed_overlaps", r.seed_overlaps},
              {"stage1_total", r.stage1()},
              {"stage2_flag_exact", r.flag_exact},
              {"context_based_total", r.context_based()},
              {"removed", r.removed()},
              {"kept", r.kept},
              {"s_min", r.s_min}};
    j["stage3_flag_partial"] = r.context_breakdown_known ? json(r.flag_partial) : json(nullptr);
    j["stage4_few_sources"] = r.context_breakdown_known ? json(r.few_sources) : json(nullptr);
    return j;
}

// ---------------------------------------------------------------------------
// Run configuration and loop
// ---------------------------------------------------------------------------

struct FountainConfig {
    std::size_t N = 2048;  // context token budget
    std::size_t k = 3;
    int S_min = 3;
    int n_max = 1;
    std::string flag_string = kDefaultFlag;
    Seed seed;
    std::size_t chunk_tokens = 256;
    std::size_t query_max_tokens = 32;
    std::optional<std::size_t> target_size;
    std::optional<double> min_acceptance_rate;
    int workers = 4;

    void check() const {
        if (N < 1) throw ConfigError("fountain: N must be >= 1");
        if (k < 1) throw ConfigError("fountain: k must be >= 1");
        if (S_min < 1) throw ConfigError("fountain: S_min must be >= 1");
        if (n_max < 1) throw ConfigError("fountain: n_max must be >= 1");
        if (chunk_tokens < 1) throw ConfigError("fountain: chunk_tokens must be >= 1");
        if (min_acceptance_rate && (*min_acceptance_rate < 0 || *min_acceptance_rate > 1))
            throw ConfigError("fountain: min_acceptance_rate must be in [0, 1]");
        if (trim(flag_string).empty()) throw ConfigError("fountain: flag_string must not be empty");
    }
};

inline FountainConfig fountain_config_from_json(const json& j) {
    try {
        FountainConfig c;
        c.N = j.value("N", c.N);
        c.k = j.value("k", c.k);
        c.S_min = j.value("S_min", c.S_min);
        c.n_max = j.value("n_max", c.n_max);
        c.flag_string = j.value("flag_string", c.flag_string);
        c.seed.value = j.value("seed", std::uint64_t{0});
        c.chunk_tokens = j.value("chunk_tokens", c.chunk_tokens);
        c.query_max_tokens = j.value("query_max_tokens", c.query_max_tokens);
        if (j.contains("target_size") && !j["target_size"].is_null()) c.target_size = j["target_size"].get<std::size_t>();
        if (j.contains("min_acceptance_rate") && !j["min_acceptance_rate"].is_null())
            c.min_acceptance_rate = j["min_acceptance_rate"].get<double>();
        c.workers = j.value("workers", c.workers);
        c.check();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("fountain config: ") + e.what());
    }
}

inline json to_json(const FountainConfig& c) {
    return {{"N", c.N},
            {"k", c.k},
            {"S_min", c.S_min},
            {"n_max", c.n_max},
            {"flag_string", c.flag_string},
            {"seed", c.seed.value},
            {"rng", c.seed.algorithm_id},
            {"chunk_tokens", c.chunk_tokens},
            {"query_max_tokens", c.query_max_tokens},
            {"target_size", c.target_size ? json(*c.target_size) : json(nullptr)},
            {"min_acceptance_rate", c.min_acceptance_rate ? json(*c.min_acceptance_rate) : json(nullptr)},
            {"workers", c.workers}};
}

struct SeedQuestion {
    std::string id;
    std::string text;
    std::string question_type = kFallbackQuestionType;
};

/// Seeds file: JSON array of strings or {id?, question|text, question_type?}
/// objects, or JSONL of the same objects.
inline std::vector<SeedQuestion> parse_seeds(const std::vector<json>& rows) {
    std::vector<SeedQuestion> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const json& r = rows[i];
        SeedQuestion s;
        s.id = fmt::format("s{:04d}", i + 1);
        if (r.is_string()) {
            s.text = r.get<std::string>();
        } else if (r.is_object()) {
            s.id = r.value("id", s.id);
            s.text = r.contains("question") ? r["question"].get<std::string>() : r.value("text", std::string{});
            if (auto t = r.find("question_type"); t != r.end())
                s.question_type = question_type_key(t->get<std::string>()).value_or(kFallbackQuestionType);
        } else {
            throw InputError(fmt::format("seed {}: expected string or object", i + 1));
        }
        if (trim(s.text).empty()) throw InputError(fmt::format("seed {}: empty question", i + 1));
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<SeedQuestion> load_seeds(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '[') {
        try {
            const json arr = json::parse(text);
            return parse_seeds(std::vector<json>(arr.begin(), arr.end()));
        } catch (const json::parse_error& e) {
            throw InputError(path.string() + ": " + e.what());
        }
    }
    return parse_seeds(parse_jsonl(text, path.string()));
}

struct FountainServices {
    Retriever* retriever = nullptr;
    Embedder* embedder = nullptr;
    ChatClient* generator = nullptr;
    ChatClient* querygen = nullptr;  // optional
    TokenCounter counter = bytes_per_4_counter();
};

struct IterationCounts {
    int n = 0;
    std::size_t pool_size = 0;
    std::size_t accepted = 0;
    std::size_t insufficient = 0;
    std::size_t few_sources = 0;
    std::size_t transport_failed = 0;
    std::size_t no_context = 0;
    std::size_t query_fallbacks = 0;
    std::size_t children = 0;
    std::size_t child_shortfall = 0;
    std::size_t max_context_tokens = 0;

    double acceptance_rate() const {
        return pool_size == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(pool_size);
    }
};

struct FountainRun {
    std::vector<FountainTuple> dataset;
    std::vector<IterationCounts> iterations;
    std::vector<std::size_t> pool_sizes;  // |Q_0|, |Q_1|, ...
    std::string stop_reason;
    std::vector<std::string> warnings;
};

inline json to_json(const IterationCounts& c) {
    return {{"n", c.n},
            {"pool_size", c.pool_size},
            {"accepted", c.accepted},
            {"rejected",
             {{"insufficient_context", c.insufficient},
              {"few_sources", c.few_sources},
              {"transport_failure", c.transport_failed},
              {"no_context", c.no_context}}},
            {"query_fallbacks", c.query_fallbacks},
            {"children", c.children},
            {"child_shortfall", c.child_shortfall},
            {"max_context_tokens", c.max_context_tokens}};
}

inline json fountain_manifest(const FountainRun& run, const FountainConfig& cfg, const FountainServices& svc) {
    json its = json::array();
    for (const auto& c : run.iterations) its.push_back(to_json(c));
    return {{"config", to_json(cfg)},
            {"token_counter", svc.counter.name},
            {"embedder", svc.embedder ? svc.embedder->name() : std::string{}},
            {"generator", svc.generator ? svc.generator->config().name : std::string{}},
            {"pool_sizes", run.pool_sizes},
            {"iterations", its},
            {"dataset_size", run.dataset.size()},
            {"stop_reason", run.stop_reason},
            {"warnings", run.warnings}};
}

namespace detail {

struct PoolQuestion {
    std::string id;
    std::string text;
    std::string question_type;
    std::optional<std::string> parent_id;
};

struct QuestionOutcome {
    enum class Status { accepted, insufficient, few_sources, transport, no_context } status = Status::no_context;
    FountainTuple tuple;
    std::vector<PoolQuestion> children;
    std::size_t shortfall = 0;
    bool query_fallback = false;
    std::size_t context_tokens = 0;
    std::vector<std::string> warnings;
};

}  // namespace detail

/// Retrieve, rank, pack, generate, gate, diversify; iteration boundaries are
/// barriers and every per-question result lands in its pool slot, so counts
/// and output order do not depend on scheduling.
inline FountainRun run_fountain(const FountainConfig& cfg, const std::vector<SeedQuestion>& seeds,
                                const FountainServices& svc) {
    cfg.check();
    if (!svc.retriever || !svc.embedder || !svc.generator)
        throw ConfigError("fountain: retriever, embedder and generator are required");
    if (seeds.empty()) throw InputError("fountain: no seed questions");

    using detail::PoolQuestion;
    using Status = detail::QuestionOutcome::Status;
    FountainRun run;
    std::vector<PoolQuestion> pool;
    for (const auto& s : seeds) pool.push_back({s.id, s.text, s.question_type, std::nullopt});
    run.pool_sizes.push_back(pool.size());

    for (int n = 0; n < cfg.n_max; ++n) {
        std::vector<detail::QuestionOutcome> results(pool.size());
        parallel_for(pool.size(), cfg.workers, [&](std::size_t i) {
            const PoolQuestion& q = pool[i];
            auto& out = results[i];
            try {
                const SearchQuery query = make_query(q.text, svc.querygen, cfg.query_max_tokens, svc.counter);
                out.query_fallback = svc.querygen && query.generation_failed;
                std::vector<Chunk> chunks;
                for (const auto& doc : svc.retriever->search(query.text)) {
                    auto cs = segment_document(doc.content, doc.url, cfg.chunk_tokens, svc.counter);
                    chunks.insert(chunks.end(), cs.begin(), cs.end());
                }
                if (chunks.empty()) {
                    out.status = Status::no_context;
                    return;
                }
                std::vector<std::string> texts{q.text};
                for (const auto& c : chunks) texts.push_back(c.text);
                auto emb = svc.embedder->embed(texts);
                const std::vector<double> qv = std::move(emb.front());
                emb.erase(emb.begin());
                const auto ranked = rank_chunks(std::move(chunks), emb, qv, &out.warnings);
                const PackedContext ctx = pack_context(ranked, cfg.N, svc.counter);
                out.context_tokens = ctx.total_tokens;
                if (ctx.used.empty()) {
                    out.status = Status::no_context;
                    return;
                }
                const GatedAnswer g = generate_gated(ctx.context, q.text, *svc.generator, cfg.flag_string);
                if (g.transport_failed) {
                    out.status = Status::transport;
                    out.warnings.push_back(q.id + ": " + g.error);
                    return;
                }
                if (g.insufficient) {
                    out.status = Status::insufficient;
                    return;
                }
                std::set<std::string> sources;
                for (const auto& c : ctx.used) sources.insert(c.source_url);
                const int source_count = static_cast<int>(sources.size());
                if (source_count < cfg.S_min) {
                    out.status = Status::few_sources;
                    return;
                }
                out.status = Status::accepted;
                out.tuple = FountainTuple{q.id, q.text, *g.answer, ctx.context, source_count, q.question_type, n,
                                          q.parent_id};
                Rng rng = Rng::substream(cfg.seed, fnv1a64(q.id));
                const Diversified d = diversify(q.text, ctx.context, cfg.k, *svc.generator, rng);
                out.shortfall = d.shortfall;
                for (std::size_t c = 0; c < d.children.size(); ++c)
                    out.children.push_back(
                        {fmt::format("{}.{}", q.id, c + 1), d.children[c].text, d.children[c].question_type, q.id});
            } catch (const TransportError& e) {
                out.status = Status::transport;
                out.warnings.push_back(q.id + ": " + e.what());
            } catch (const ProtocolError& e) {
                out.status = Status::transport;
                out.warnings.push_back(q.id + ": " + e.what());
            }
        });

        IterationCounts counts;
        counts.n = n;
        counts.pool_size = pool.size();
        std::vector<PoolQuestion> next;
        for (auto& r : results) {
            if (r.query_fallback) ++counts.query_fallbacks;
            counts.max_context_tokens = std::max(counts.max_context_tokens, r.context_tokens);
            for (auto& w : r.warnings) run.warnings.push_back(std::move(w));
            switch (r.status) {
                case Status::accepted:
                    ++counts.accepted;
                    run.dataset.push_back(std::move(r.tuple));
                    counts.child_shortfall += r.shortfall;
                    for (auto& c : r.children) next.push_back(std::move(c));
                    break;
                case Status::insufficient: ++counts.insufficient; break;
                case Status::few_sources: ++counts.few_sources; break;
                case Status::transport: ++counts.transport_failed; break;
                case Status::no_context: ++counts.no_context; break;
            }
        }
        counts.children = next.size();
        run.iterations.push_back(counts);
        run.pool_sizes.push_back(next.size());

        if (n == 0 && counts.accepted == 0)
            throw ValidationError("fountain: every seed question was rejected in the first iteration");
        pool = std::move(next);
        if (cfg.target_size && run.dataset.size() >= *cfg.target_size) {
            run.stop_reason = "target_size";
            break;
        }
        if (cfg.min_acceptance_rate && counts.acceptance_rate() < *cfg.min_acceptance_rate) {
            run.stop_reason = "acceptance_rate";
            break;
        }
        if (pool.empty()) {
            run.stop_reason = "empty_pool";
            break;
        }
    }
    if (run.stop_reason.empty()) run.stop_reason = "n_max";
    return run;
}

}  // namespace exameval
