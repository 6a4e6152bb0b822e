#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "compass/model.hpp"
#include "compass/pair.hpp"

namespace compass {

// Closed word-level vocabulary. Ids follow the sorted word list, so the
// mapping only depends on the set of words.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> words);

    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }
    bool contains(const std::string& word) const { return index_.contains(word); }

    // Throws InvalidArgument naming the word when it is not in the vocabulary.
    int id(const std::string& word) const;
    const std::string& word(int id) const;

    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

    bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// Whitespace split; the word count is the token count.
std::vector<std::string> split_words(const std::string& text);

struct Lexicon {
    std::string role;
    std::vector<std::string> fillers;
    std::map<int, std::vector<std::string>> scaffolds;  // keyed by token count

    bool has_filler(const std::string& word) const;
};

// A frame with its single-word slot fillers. `roles` lists the roles the
// frame licenses; an empty list licenses every role.
struct Template {
    std::string frame;
    std::string verb;
    std::vector<std::string> agents;
    std::vector<std::string> themes;
    std::vector<std::string> roles;

    bool licenses(const std::string& role) const;
};

inline constexpr int kDataFormatVersion = 1;

std::vector<Lexicon> load_lexicons(const std::filesystem::path& path);
std::vector<Template> load_templates(const std::filesystem::path& path);
std::vector<Lexicon> lexicons_from_string(const std::string& text);
std::vector<Template> templates_from_string(const std::string& text);

// Case-insensitive lookup; throws InvalidArgument listing the known roles.
const Lexicon& find_lexicon(const std::vector<Lexicon>& lexicons, const std::string& role);

// Keeps the requested roles (all when `roles` is empty), in lexicon order.
std::vector<Lexicon> select_roles(const std::vector<Lexicon>& lexicons, const std::vector<std::string>& roles);

// "The", "the", every scaffold word and filler of the given lexicons, and
// the verb/agents/themes of templates licensing at least one of them.
Vocabulary build_vocabulary(const std::vector<Lexicon>& lexicons, const std::vector<Template>& templates);

// "The <agent> <verb> the <theme>"
std::string frame_prefix(const std::string& agent, const std::string& verb, const std::string& theme);

// Roles that share a scaffold length with `role`, have a template licensing
// both, and keep at least one filler on each side outside the other's
// lexicon. Sorted by name.
std::vector<std::string> partner_roles(const std::vector<Lexicon>& lexicons, const std::vector<Template>& templates,
                                       const std::string& role);

// Role-cross pairs with clean role `role`. Gives up after 30 * n attempts
// and returns what it has, appending a message to `warnings`. Throws
// InvalidArgument when the role has no partner.
std::vector<RoleCrossPair> generate_pairs(const std::vector<Template>& templates,
                                          const std::vector<Lexicon>& lexicons, const Vocabulary& vocab,
                                          const std::string& role, int n, std::uint64_t seed,
                                          std::vector<std::string>* warnings = nullptr);

struct PairCheck {
    bool parity = false;
    bool leakage_free = false;
    bool single_token = false;
    bool minimal = false;
    bool distinct_roles = false;

    bool ok() const { return parity && leakage_free && single_token && minimal && distinct_roles; }
};

// Re-derives every guarantee from the pair's text and tokens.
PairCheck validate_pair(const RoleCrossPair& pair, const Vocabulary& vocab, const std::vector<Lexicon>& lexicons);

bool has_parity(const RoleCrossPair& pair);
bool has_leakage(const RoleCrossPair& pair);

// Pairs the model answers correctly on both sides, in input order.
std::vector<RoleCrossPair> filter_dual_correct(const std::vector<RoleCrossPair>& pairs, const Checkpoint& ckpt);
bool is_dual_correct(const RoleCrossPair& pair, const Checkpoint& ckpt);

// Swaps each pair's clean scaffold for a different one of the same role and
// length. Pairs without an alternative are skipped with a warning.
std::vector<RoleCrossPair> generate_paraphrase_controls(const std::vector<RoleCrossPair>& pairs,
                                                        const std::vector<Lexicon>& lexicons,
                                                        const Vocabulary& vocab, std::uint64_t seed,
                                                        std::vector<std::string>* warnings = nullptr);

struct DatasetStats {
    std::map<std::string, int> per_role;
    int total = 0;
    double parity_rate = 1.0;   // vacuously 1 on an empty set
    double leakage_rate = 0.0;
};

DatasetStats dataset_stats(const std::vector<RoleCrossPair>& pairs);
std::string stats_to_json(const DatasetStats& stats);

// One JSON object per line with the words only; ids are recomputed on load.
std::string pairs_to_jsonl(const std::vector<RoleCrossPair>& pairs);
std::vector<RoleCrossPair> pairs_from_jsonl(const std::string& text, const Vocabulary& vocab);
void save_pairs(const std::vector<RoleCrossPair>& pairs, const std::filesystem::path& path);
std::vector<RoleCrossPair> load_pairs(const std::filesystem::path& path, const Vocabulary& vocab);

// Builds a pair from its words, tokenising with `vocab`.
RoleCrossPair make_pair(const std::string& clean, const std::string& corrupt, const std::string& target_clean,
                        const std::string& target_corrupt, const std::string& role_clean,
                        const std::string& role_corrupt, const Vocabulary& vocab);

// Vocabulary file: one word per line, id = line number.
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocabulary(const std::filesystem::path& path);

// Training sentences "<prefix> <scaffold> <filler>" for every licensed
// (template, agent, theme, role, scaffold); the filler is the role's
// fillers[k % n] where k is the theme's index among all sorted themes.
std::vector<std::string> generate_corpus(const std::vector<Template>& templates,
                                         const std::vector<Lexicon>& lexicons);

// Corpus file: plain text, one document per line.
void save_corpus(const std::vector<std::string>& docs, const std::filesystem::path& path);
std::vector<std::string> load_corpus(const std::filesystem::path& path);
std::vector<std::vector<int>> tokenize_corpus(const std::vector<std::string>& docs, const Vocabulary& vocab);

}  // namespace compass
