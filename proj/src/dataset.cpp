#include "compass/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "compass/error.hpp"
#include "compass/graph_io.hpp"
#include "compass/parallel.hpp"
#include "compass/rng.hpp"

namespace compass {

using nlohmann::json;

namespace {

std::string lower(std::string s) {
    for (char& c : s) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return s;
}

bool ends_with_words(const std::string& text, const std::string& suffix) {
    if (text.size() <= suffix.size()) {
        return false;
    }
    return text.compare(text.size() - suffix.size(), suffix.size(), suffix) == 0 &&
           text[text.size() - suffix.size() - 1] == ' ';
}

template <class T>
const T& pick(Rng& rng, const std::vector<T>& items) {
    return items[static_cast<std::size_t>(rng.uniform_index(items.size()))];
}

std::vector<std::string> string_list(const json& j, const std::string& where) {
    if (!j.is_array()) {
        throw ParseError(where + " must be a list of strings");
    }
    std::vector<std::string> out;
    for (const auto& item : j) {
        if (!item.is_string()) {
            throw ParseError(where + " must be a list of strings");
        }
        out.push_back(item.get<std::string>());
    }
    return out;
}

void require_single_word(const std::string& word, const std::string& where) {
    if (split_words(word).size() != 1 || word.find_first_of(" \t\r\n") != std::string::npos) {
        throw ParseError(where + ": '" + word + "' is not a single token");
    }
}

json parse_versioned(const std::string& text, const char* what) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string(what) + " file is not valid JSON: " + e.what());
    }
    if (!doc.is_object() || !doc.contains("version") || !doc["version"].is_number_integer()) {
        throw ParseError(std::string(what) + " file needs an integer 'version'");
    }
    const int version = doc["version"].get<int>();
    if (version != kDataFormatVersion) {
        throw VersionMismatch(std::string(what) + " file version " + std::to_string(version) +
                              " is not supported (expected " + std::to_string(kDataFormatVersion) + ")");
    }
    return doc;
}

// Longest scaffold of `lex` that ends `text`; empty when none does.
std::pair<int, std::string> trailing_scaffold(const Lexicon& lex, const std::string& text) {
    std::pair<int, std::string> best{0, ""};
    for (const auto& [len, group] : lex.scaffolds) {
        for (const auto& s : group) {
            if (ends_with_words(text, s) && s.size() > best.second.size()) {
                best = {len, s};
            }
        }
    }
    return best;
}

const Lexicon* lookup(const std::vector<Lexicon>& lexicons, const std::string& role) {
    for (const auto& lex : lexicons) {
        if (lex.role == role) {
            return &lex;
        }
    }
    return nullptr;
}

}  // namespace

// Vocabulary --------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (const auto& w : words) {
        if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
            throw InvalidArgument("vocabulary word '" + w + "' is empty or contains whitespace");
        }
    }
    words_ = std::move(words);
    for (std::size_t i = 0; i < words_.size(); ++i) {
        index_.emplace(words_[i], static_cast<int>(i));
    }
}

int Vocabulary::id(const std::string& word) const {
    const auto it = index_.find(word);
    if (it == index_.end()) {
        throw InvalidArgument("word '" + word + "' is not in the vocabulary");
    }
    return it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) {
        throw InvalidArgument("token id " + std::to_string(id) + " is outside the vocabulary of size " +
                              std::to_string(size()));
    }
    return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
        ids.push_back(id(w));
    }
    return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i > 0) {
            out += ' ';
        }
        out += word(ids[i]);
    }
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) {
        words.push_back(w);
    }
    return words;
}

// Lexicons and templates --------------------------------------------------

bool Lexicon::has_filler(const std::string& word) const {
    return std::find(fillers.begin(), fillers.end(), word) != fillers.end();
}

bool Template::licenses(const std::string& role) const {
    return roles.empty() || std::find(roles.begin(), roles.end(), role) != roles.end();
}

std::vector<Lexicon> lexicons_from_string(const std::string& text) {
    const json doc = parse_versioned(text, "lexicon");
    if (!doc.contains("roles") || !doc["roles"].is_array()) {
        throw ParseError("lexicon file needs a 'roles' list");
    }
    std::vector<Lexicon> out;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < doc["roles"].size(); ++i) {
        const json& r = doc["roles"][i];
        const std::string where = "roles[" + std::to_string(i) + "]";
        if (!r.is_object() || !r.contains("role") || !r["role"].is_string()) {
            throw ParseError(where + " needs a string 'role'");
        }
        Lexicon lex;
        lex.role = r["role"].get<std::string>();
        if (!seen.insert(lower(lex.role)).second) {
            throw ParseError(where + ": duplicate role '" + lex.role + "'");
        }
        lex.fillers = string_list(r.value("fillers", json()), where + ".fillers");
        if (lex.fillers.empty()) {
            throw ParseError(where + ": role '" + lex.role + "' has no fillers");
        }
        for (const auto& f : lex.fillers) {
            require_single_word(f, where + ".fillers");
        }
        const json& sc = r.value("scaffolds", json());
        if (!sc.is_object() || sc.empty()) {
            throw ParseError(where + ".scaffolds must map token counts to scaffold lists");
        }
        for (const auto& [key, value] : sc.items()) {
            int len = 0;
            try {
                std::size_t used = 0;
                len = std::stoi(key, &used);
                if (used != key.size()) {
                    throw std::invalid_argument(key);
                }
            } catch (const std::exception&) {
                throw ParseError(where + ".scaffolds: key '" + key + "' is not a token count");
            }
            auto group = string_list(value, where + ".scaffolds." + key);
            for (const auto& s : group) {
                if (static_cast<int>(split_words(s).size()) != len) {
                    throw ParseError(where + ".scaffolds." + key + ": '" + s + "' does not have " + key + " tokens");
                }
            }
            if (!group.empty()) {
                lex.scaffolds[len] = std::move(group);
            }
        }
        out.push_back(std::move(lex));
    }
    return out;
}

std::vector<Template> templates_from_string(const std::string& text) {
    const json doc = parse_versioned(text, "template");
    if (!doc.contains("templates") || !doc["templates"].is_array()) {
        throw ParseError("template file needs a 'templates' list");
    }
    std::vector<Template> out;
    for (std::size_t i = 0; i < doc["templates"].size(); ++i) {
        const json& t = doc["templates"][i];
        const std::string where = "templates[" + std::to_string(i) + "]";
        if (!t.is_object() || !t.contains("verb") || !t["verb"].is_string()) {
            throw ParseError(where + " needs a string 'verb'");
        }
        Template tpl;
        tpl.frame = t.value("frame", std::string());
        tpl.verb = t["verb"].get<std::string>();
        require_single_word(tpl.verb, where + ".verb");
        tpl.agents = string_list(t.value("agents", json()), where + ".agents");
        tpl.themes = string_list(t.value("themes", json()), where + ".themes");
        if (t.contains("roles")) {
            tpl.roles = string_list(t["roles"], where + ".roles");
        }
        if (tpl.agents.empty() || tpl.themes.empty()) {
            throw ParseError(where + " needs at least one agent and one theme");
        }
        for (const auto& w : tpl.agents) {
            require_single_word(w, where + ".agents");
        }
        for (const auto& w : tpl.themes) {
            require_single_word(w, where + ".themes");
        }
        out.push_back(std::move(tpl));
    }
    return out;
}

std::vector<Lexicon> load_lexicons(const std::filesystem::path& path) {
    try {
        return lexicons_from_string(read_text_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::vector<Template> load_templates(const std::filesystem::path& path) {
    try {
        return templates_from_string(read_text_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

const Lexicon& find_lexicon(const std::vector<Lexicon>& lexicons, const std::string& role) {
    const std::string want = lower(role);
    std::string known;
    for (const auto& lex : lexicons) {
        if (lower(lex.role) == want) {
            return lex;
        }
        known += (known.empty() ? "" : ", ") + lex.role;
    }
    throw InvalidArgument("unknown role '" + role + "' (known: " + known + ")");
}

std::vector<Lexicon> select_roles(const std::vector<Lexicon>& lexicons, const std::vector<std::string>& roles) {
    if (roles.empty()) {
        return lexicons;
    }
    std::set<std::string> wanted;
    for (const auto& r : roles) {
        wanted.insert(find_lexicon(lexicons, r).role);
    }
    std::vector<Lexicon> out;
    for (const auto& lex : lexicons) {
        if (wanted.contains(lex.role)) {
            out.push_back(lex);
        }
    }
    return out;
}

Vocabulary build_vocabulary(const std::vector<Lexicon>& lexicons, const std::vector<Template>& templates) {
    std::vector<std::string> words{"The", "the"};
    for (const auto& lex : lexicons) {
        words.insert(words.end(), lex.fillers.begin(), lex.fillers.end());
        for (const auto& [len, group] : lex.scaffolds) {
            for (const auto& s : group) {
                const auto ws = split_words(s);
                words.insert(words.end(), ws.begin(), ws.end());
            }
        }
    }
    for (const auto& tpl : templates) {
        const bool used = std::any_of(lexicons.begin(), lexicons.end(),
                                      [&](const Lexicon& lex) { return tpl.licenses(lex.role); });
        if (!used) {
            continue;
        }
        words.push_back(tpl.verb);
        words.insert(words.end(), tpl.agents.begin(), tpl.agents.end());
        words.insert(words.end(), tpl.themes.begin(), tpl.themes.end());
    }
    return Vocabulary(std::move(words));
}

std::string frame_prefix(const std::string& agent, const std::string& verb, const std::string& theme) {
    return "The " + agent + " " + verb + " the " + theme;
}

// Generation ---------------------------------------------------------------

std::vector<std::string> partner_roles(const std::vector<Lexicon>& lexicons, const std::vector<Template>& templates,
                                       const std::string& role) {
    const Lexicon& r = find_lexicon(lexicons, role);
    std::vector<std::string> out;
    for (const auto& s : lexicons) {
        if (s.role == r.role) {
            continue;
        }
        const bool parity = std::any_of(r.scaffolds.begin(), r.scaffolds.end(),
                                        [&](const auto& kv) { return s.scaffolds.contains(kv.first); });
        const bool shared_frame = std::any_of(templates.begin(), templates.end(), [&](const Template& t) {
            return t.licenses(r.role) && t.licenses(s.role);
        });
        const bool r_distinct = std::any_of(r.fillers.begin(), r.fillers.end(),
                                            [&](const std::string& w) { return !s.has_filler(w); });
        const bool s_distinct = std::any_of(s.fillers.begin(), s.fillers.end(),
                                            [&](const std::string& w) { return !r.has_filler(w); });
        if (parity && shared_frame && r_distinct && s_distinct) {
            out.push_back(s.role);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

RoleCrossPair make_pair(const std::string& clean, const std::string& corrupt, const std::string& target_clean,
                        const std::string& target_corrupt, const std::string& role_clean,
                        const std::string& role_corrupt, const Vocabulary& vocab) {
    RoleCrossPair p;
    p.clean_text = clean;
    p.corrupt_text = corrupt;
    p.clean_tokens = vocab.tokenize(clean);
    p.corrupt_tokens = vocab.tokenize(corrupt);
    p.target_clean_word = target_clean;
    p.target_corrupt_word = target_corrupt;
    p.target_clean = vocab.id(target_clean);
    p.target_corrupt = vocab.id(target_corrupt);
    p.role_clean = role_clean;
    p.role_corrupt = role_corrupt;
    return p;
}

std::vector<RoleCrossPair> generate_pairs(const std::vector<Template>& templates,
                                          const std::vector<Lexicon>& lexicons, const Vocabulary& vocab,
                                          const std::string& role, int n, std::uint64_t seed,
                                          std::vector<std::string>* warnings) {
    if (n < 0) {
        throw InvalidArgument("generate_pairs: n must be >= 0");
    }
    const Lexicon& r = find_lexicon(lexicons, role);
    const std::vector<std::string> partners = partner_roles(lexicons, templates, r.role);
    if (partners.empty()) {
        throw InvalidArgument("role '" + r.role +
                              "' has no partner role with a matching scaffold length, a shared frame and a "
                              "distinct lexicon");
    }
    std::vector<RoleCrossPair> out;
    if (n == 0) {
        return out;
    }
    Rng rng(derive_seed(seed, "pairs:" + r.role));
    const long long patience = 30LL * n;
    long long attempts = 0;
    while (static_cast<int>(out.size()) < n && attempts < patience) {
        ++attempts;
        const std::string& y_r = pick(rng, r.fillers);
        const Lexicon& s = *lookup(lexicons, pick(rng, partners));

        std::vector<int> lengths;
        for (const auto& [len, group] : r.scaffolds) {
            if (s.scaffolds.contains(len)) {
                lengths.push_back(len);
            }
        }
        const int len = pick(rng, lengths);
        const std::string& sc_r = pick(rng, r.scaffolds.at(len));
        const std::string& sc_s = pick(rng, s.scaffolds.at(len));

        std::vector<const Template*> frames;
        for (const auto& t : templates) {
            if (t.licenses(r.role) && t.licenses(s.role)) {
                frames.push_back(&t);
            }
        }
        const Template& tpl = *pick(rng, frames);
        const std::string& agent = pick(rng, tpl.agents);
        const std::string& theme = pick(rng, tpl.themes);
        const std::string& y_s = pick(rng, s.fillers);

        if (y_r == y_s || s.has_filler(y_r) || r.has_filler(y_s)) {
            continue;
        }
        const std::string prefix = frame_prefix(agent, tpl.verb, theme);
        RoleCrossPair p = make_pair(prefix + " " + sc_r, prefix + " " + sc_s, y_r, y_s, r.role, s.role, vocab);
        if (!has_parity(p) || has_leakage(p)) {
            continue;
        }
        out.push_back(std::move(p));
    }
    if (static_cast<int>(out.size()) < n && warnings) {
        warnings->push_back("role '" + r.role + "': patience exhausted after " + std::to_string(patience) +
                            " attempts with " + std::to_string(out.size()) + " of " + std::to_string(n) + " pairs");
    }
    return out;
}

// Validation ---------------------------------------------------------------

bool has_parity(const RoleCrossPair& pair) { return pair.clean_tokens.size() == pair.corrupt_tokens.size(); }

bool has_leakage(const RoleCrossPair& pair) {
    for (const auto* seq : {&pair.clean_tokens, &pair.corrupt_tokens}) {
        for (const int t : *seq) {
            if (t == pair.target_clean || t == pair.target_corrupt) {
                return true;
            }
        }
    }
    return false;
}

PairCheck validate_pair(const RoleCrossPair& pair, const Vocabulary& vocab, const std::vector<Lexicon>& lexicons) {
    PairCheck c;
    c.parity = has_parity(pair);
    c.leakage_free = !has_leakage(pair);
    c.distinct_roles = pair.role_clean != pair.role_corrupt && pair.target_clean != pair.target_corrupt;

    const auto one_token = [&](const std::string& word, int id) {
        return split_words(word).size() == 1 && word.find(' ') == std::string::npos && vocab.contains(word) &&
               vocab.id(word) == id;
    };
    const auto retokenizes = [&](const std::string& text, const std::vector<int>& ids) {
        for (const auto& w : split_words(text)) {
            if (!vocab.contains(w)) {
                return false;
            }
        }
        return vocab.tokenize(text) == ids;
    };
    c.single_token = one_token(pair.target_clean_word, pair.target_clean) &&
                     one_token(pair.target_corrupt_word, pair.target_corrupt) &&
                     retokenizes(pair.clean_text, pair.clean_tokens) &&
                     retokenizes(pair.corrupt_text, pair.corrupt_tokens);

    const Lexicon* lr = lookup(lexicons, pair.role_clean);
    const Lexicon* ls = lookup(lexicons, pair.role_corrupt);
    if (lr && ls) {
        const auto [len_r, sc_r] = trailing_scaffold(*lr, pair.clean_text);
        const auto [len_s, sc_s] = trailing_scaffold(*ls, pair.corrupt_text);
        if (!sc_r.empty() && !sc_s.empty() && len_r == len_s) {
            const std::string pre_r = pair.clean_text.substr(0, pair.clean_text.size() - sc_r.size());
            const std::string pre_s = pair.corrupt_text.substr(0, pair.corrupt_text.size() - sc_s.size());
            // Token positions outside the scaffold must match one for one.
            const std::size_t span = static_cast<std::size_t>(len_r);
            bool same_outside = pre_r == pre_s && c.parity && pair.clean_tokens.size() >= span;
            for (std::size_t i = 0; same_outside && i + span < pair.clean_tokens.size(); ++i) {
                same_outside = pair.clean_tokens[i] == pair.corrupt_tokens[i];
            }
            c.minimal = same_outside;
        }
    }
    return c;
}

bool is_dual_correct(const RoleCrossPair& pair, const Checkpoint& ckpt) {
    return argmax_last(forward_logits(ckpt, pair.clean_tokens)) == pair.target_clean &&
           argmax_last(forward_logits(ckpt, pair.corrupt_tokens)) == pair.target_corrupt;
}

std::vector<RoleCrossPair> filter_dual_correct(const std::vector<RoleCrossPair>& pairs, const Checkpoint& ckpt) {
    const auto keep = parallel_map<char>(pairs.size(), [&](std::size_t i) {
        return static_cast<char>(is_dual_correct(pairs[i], ckpt));
    });
    std::vector<RoleCrossPair> out;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (keep[i]) {
            out.push_back(pairs[i]);
        }
    }
    return out;
}

std::vector<RoleCrossPair> generate_paraphrase_controls(const std::vector<RoleCrossPair>& pairs,
                                                        const std::vector<Lexicon>& lexicons,
                                                        const Vocabulary& vocab, std::uint64_t seed,
                                                        std::vector<std::string>* warnings) {
    Rng rng(derive_seed(seed, "paraphrase"));
    std::vector<RoleCrossPair> out;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const RoleCrossPair& p = pairs[i];
        const Lexicon* lex = lookup(lexicons, p.role_clean);
        const auto skip = [&](const std::string& why) {
            if (warnings) {
                warnings->push_back("paraphrase: pair " + std::to_string(i) + " skipped, " + why);
            }
        };
        if (!lex) {
            skip("unknown role '" + p.role_clean + "'");
            continue;
        }
        const auto [len, original] = trailing_scaffold(*lex, p.clean_text);
        if (original.empty()) {
            skip("no " + lex->role + " scaffold ends the clean prompt");
            continue;
        }
        std::vector<std::string> alternatives;
        for (const auto& s : lex->scaffolds.at(len)) {
            if (s != original) {
                alternatives.push_back(s);
            }
        }
        if (alternatives.empty()) {
            skip("role '" + lex->role + "' has a single " + std::to_string(len) + "-token scaffold");
            continue;
        }
        const std::string& replacement = pick(rng, alternatives);
        const std::string prefix = p.clean_text.substr(0, p.clean_text.size() - original.size());
        out.push_back(make_pair(prefix + replacement, p.corrupt_text, p.target_clean_word, p.target_corrupt_word,
                                p.role_clean, p.role_corrupt, vocab));
    }
    return out;
}

DatasetStats dataset_stats(const std::vector<RoleCrossPair>& pairs) {
    DatasetStats s;
    s.total = static_cast<int>(pairs.size());
    int parity = 0;
    int leaks = 0;
    for (const auto& p : pairs) {
        ++s.per_role[p.role_clean];
        parity += has_parity(p) ? 1 : 0;
        leaks += has_leakage(p) ? 1 : 0;
    }
    if (!pairs.empty()) {
        s.parity_rate = static_cast<double>(parity) / static_cast<double>(pairs.size());
        s.leakage_rate = static_cast<double>(leaks) / static_cast<double>(pairs.size());
    }
    return s;
}

std::string stats_to_json(const DatasetStats& stats) {
    json roles = json::object();
    for (const auto& [role, count] : stats.per_role) {
        roles[role] = count;
    }
    const json doc{{"per_role", roles},
                   {"total", stats.total},
                   {"parity_rate", stats.parity_rate},
                   {"leakage_rate", stats.leakage_rate}};
    return doc.dump(2) + "\n";
}

// Files ---------------------------------------------------------------------

std::string pairs_to_jsonl(const std::vector<RoleCrossPair>& pairs) {
    std::string out;
    for (const auto& p : pairs) {
        const json rec{{"clean", p.clean_text},
                       {"corrupt", p.corrupt_text},
                       {"target_clean", p.target_clean_word},
                       {"target_corrupt", p.target_corrupt_word},
                       {"role_clean", p.role_clean},
                       {"role_corrupt", p.role_corrupt}};
        out += rec.dump();
        out += '\n';
    }
    return out;
}

std::vector<RoleCrossPair> pairs_from_jsonl(const std::string& text, const Vocabulary& vocab) {
    std::vector<RoleCrossPair> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (split_words(line).empty()) {
            continue;
        }
        const std::string where = "pairs line " + std::to_string(line_no);
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(where + ": " + e.what());
        }
        const auto field = [&](const char* key) {
            if (!rec.is_object() || !rec.contains(key) || !rec[key].is_string()) {
                throw ParseError(where + ": missing string field '" + key + "'");
            }
            return rec[key].get<std::string>();
        };
        try {
            out.push_back(make_pair(field("clean"), field("corrupt"), field("target_clean"), field("target_corrupt"),
                                    field("role_clean"), field("role_corrupt"), vocab));
        } catch (const InvalidArgument& e) {
            throw ParseError(where + ": " + e.what());
        }
    }
    return out;
}

void save_pairs(const std::vector<RoleCrossPair>& pairs, const std::filesystem::path& path) {
    write_text_file(path, pairs_to_jsonl(pairs));
}

std::vector<RoleCrossPair> load_pairs(const std::filesystem::path& path, const Vocabulary& vocab) {
    try {
        return pairs_from_jsonl(read_text_file(path), vocab);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
    std::string text;
    for (const auto& w : vocab.words()) {
        text += w;
        text += '\n';
    }
    write_text_file(path, text);
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            words.push_back(line);
        }
    }
    Vocabulary vocab(words);
    if (vocab.words() != words) {
        throw ParseError(path.string() + ": vocabulary words must be sorted and unique");
    }
    return vocab;
}

std::vector<std::string> generate_corpus(const std::vector<Template>& templates,
                                         const std::vector<Lexicon>& lexicons) {
    std::vector<std::string> themes;
    for (const auto& t : templates) {
        themes.insert(themes.end(), t.themes.begin(), t.themes.end());
    }
    std::sort(themes.begin(), themes.end());
    themes.erase(std::unique(themes.begin(), themes.end()), themes.end());

    std::vector<std::string> docs;
    for (const auto& t : templates) {
        for (const auto& agent : t.agents) {
            for (const auto& theme : t.themes) {
                const auto k = static_cast<std::size_t>(
                    std::lower_bound(themes.begin(), themes.end(), theme) - themes.begin());
                const std::string prefix = frame_prefix(agent, t.verb, theme);
                for (const auto& lex : lexicons) {
                    if (!t.licenses(lex.role)) {
                        continue;
                    }
                    const std::string& filler = lex.fillers[k % lex.fillers.size()];
                    for (const auto& [len, group] : lex.scaffolds) {
                        for (const auto& sc : group) {
                            docs.push_back(prefix + " " + sc + " " + filler);
                        }
                    }
                }
            }
        }
    }
    return docs;
}

void save_corpus(const std::vector<std::string>& docs, const std::filesystem::path& path) {
    std::string text;
    for (const auto& d : docs) {
        text += d;
        text += '\n';
    }
    write_text_file(path, text);
}

std::vector<std::string> load_corpus(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    std::vector<std::string> docs;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!split_words(line).empty()) {
            docs.push_back(line);
        }
    }
    return docs;
}

std::vector<std::vector<int>> tokenize_corpus(const std::vector<std::string>& docs, const Vocabulary& vocab) {
    std::vector<std::vector<int>> out;
    out.reserve(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) {
        try {
            out.push_back(vocab.tokenize(docs[i]));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument("corpus line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace compass
