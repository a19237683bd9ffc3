#pragma once

// Recipes, ingredient groups, and concept vocabularies of PseudoKitchens-2.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace mlcs::data {

struct Ingredient {
    std::string name;
    int variant_count = 0;  // 0 for ingredients without variants
    int group = -1;         // index into Catalog::groups, -1 if ungrouped
};

struct IngredientGroup {
    std::string name;
    std::vector<int> members;  // ingredient indices, catalog order
    bool choose_exactly_one = false;
};

struct Requirement {
    enum class Kind { ingredient, group };
    Kind kind = Kind::ingredient;
    int index = 0;                // ingredient or group index
    std::vector<int> variants;    // allowed variants (1-based); empty = unrestricted
};

struct Recipe {
    std::string name;
    std::vector<Requirement> required;
};

/// One (ingredient, variant) identity; variant is 0 for variant-free ingredients.
struct Atom {
    int ingredient = 0;
    int variant = 0;
    auto operator<=>(const Atom&) const = default;
};

enum class BankLevel { sub, subsub };

struct BankConcept {
    std::string name;
    BankLevel level = BankLevel::sub;
    int ingredient = 0;
    int variant = 0;          // sub-sub only
    int top_concept = 0;      // designated provided concept (the group)
    int parent_bank = -1;     // sub-sub only: index of its sub-concept in the bank
};

struct TopConcept {
    std::string name;
    int group = -1;       // group concept if >= 0
    int ingredient = -1;  // ungrouped-ingredient concept otherwise
};

struct Catalog {
    std::vector<Ingredient> ingredients;
    std::vector<IngredientGroup> groups;
    std::vector<Recipe> recipes;
    std::vector<TopConcept> top_concepts;
    std::vector<BankConcept> bank;
    std::vector<Atom> atoms;  // every distinct atom, ingredient order then variant

    int ingredient_index(const std::string& name) const {
        for (std::size_t i = 0; i < ingredients.size(); ++i)
            if (ingredients[i].name == name) return static_cast<int>(i);
        return -1;
    }
    int recipe_index(const std::string& name) const {
        for (std::size_t i = 0; i < recipes.size(); ++i)
            if (recipes[i].name == name) return static_cast<int>(i);
        return -1;
    }
    int atom_index(const Atom& a) const {
        auto it = std::find(atoms.begin(), atoms.end(), a);
        return it == atoms.end() ? -1 : static_cast<int>(it - atoms.begin());
    }
    int top_concept_of_group(int group) const {
        for (std::size_t i = 0; i < top_concepts.size(); ++i)
            if (top_concepts[i].group == group) return static_cast<int>(i);
        return -1;
    }
    std::size_t sub_bank_count() const {
        return static_cast<std::size_t>(std::count_if(bank.begin(), bank.end(), [](auto& b) { return b.level == BankLevel::sub; }));
    }
    std::size_t subsub_bank_count() const { return bank.size() - sub_bank_count(); }
};

namespace detail {

inline std::string variant_name(const std::string& ingredient, int v) {
    return ingredient + " (variant " + std::to_string(v) + ")";
}

}  // namespace detail

inline Catalog build_catalog() {
    Catalog c;
    auto add_group = [&](const std::string& name, std::vector<std::pair<std::string, int>> members, bool one) {
        IngredientGroup g{name, {}, one};
        const int gi = static_cast<int>(c.groups.size());
        for (auto& [m, variants] : members) {
            g.members.push_back(static_cast<int>(c.ingredients.size()));
            c.ingredients.push_back({m, variants, gi});
        }
        c.groups.push_back(std::move(g));
    };
    add_group("Fruit", {{"Banana", 0}, {"Orange", 0}, {"Apple", 5}, {"Pear", 0}, {"Pineapple", 0}}, false);
    add_group("Vegetables", {{"Onion", 0}, {"Carrot", 0}, {"Potato", 5}, {"Pepper", 3}, {"Courgette", 0}}, false);
    add_group("Pasta", {{"Macaroni", 0}, {"Spaghetti", 0}}, true);

    auto ing = [&](const std::string& name) {
        int i = c.ingredient_index(name);
        if (i < 0) {
            i = static_cast<int>(c.ingredients.size());
            c.ingredients.push_back({name, 0, -1});
        }
        return i;
    };
    auto group = [&](const std::string& name) {
        for (std::size_t g = 0; g < c.groups.size(); ++g)
            if (c.groups[g].name == name) return static_cast<int>(g);
        return -1;
    };

    // Items are either a group name or an ingredient with optional allowed variants.
    using Item = std::pair<std::string, std::vector<int>>;
    auto add_recipe = [&](const std::string& name, std::vector<Item> items) {
        Recipe r{name, {}};
        for (auto& [item, variants] : items) {
            if (int g = group(item); g >= 0)
                r.required.push_back({Requirement::Kind::group, g, {}});
            else
                r.required.push_back({Requirement::Kind::ingredient, ing(item), variants});
        }
        c.recipes.push_back(std::move(r));
    };
    add_recipe("Fruit Salad", {{"Fruit", {}}});
    add_recipe("Vegetable Pasta", {{"Pasta", {}}, {"Onion", {}}, {"Garlic", {}}, {"Oil", {}}, {"Vegetables", {}}, {"Spice", {}}, {"Tin Tomatoes", {}}});
    add_recipe("Risotto", {{"Cheese", {}}, {"Onion", {}}, {"Garlic", {}}, {"Vegetables", {}}, {"Oil", {}}, {"Spice", {}}, {"Rice", {}}});
    add_recipe("Chips", {{"Potato", {2, 3, 4}}, {"Oil", {}}, {"Flour", {}}, {"Garlic", {}}, {"Spice", {}}});
    add_recipe("Chilli", {{"Mince", {}}, {"Oil", {}}, {"Onion", {}}, {"Garlic", {}}, {"Chilli", {}}, {"Tin Tomatoes", {}}, {"Spice", {}}, {"Rice", {}}});
    add_recipe("Smoothie", {{"Milk", {}}, {"Yoghurt", {}}, {"Fruit", {}}});
    add_recipe("Hot Chocolate", {{"Chocolate", {}}, {"Milk", {}}});
    add_recipe("Banana Bread", {{"Butter", {}}, {"Sugar", {}}, {"Egg", {}}, {"Flour", {}}, {"Banana", {}}});
    add_recipe("Chocolate Fudge Cake", {{"Egg", {}}, {"Sugar", {}}, {"Oil", {}}, {"Flour", {}}, {"Chocolate", {}}, {"Syrup", {}}, {"Milk", {}}});
    add_recipe("Carbonara", {{"Garlic", {}}, {"Meat", {}}, {"Butter", {}}, {"Cheese", {}}, {"Egg", {}}, {"Spaghetti", {}}, {"Spice", {}}});
    add_recipe("Apple Crumble", {{"Apple", {3}}, {"Sugar", {}}, {"Flour", {}}, {"Butter", {}}});
    add_recipe("Salad", {{"Pepper", {2, 3}}, {"Apple", {1, 2, 4, 5}}, {"Potato", {1, 5}}});

    for (std::size_t g = 0; g < c.groups.size(); ++g)
        c.top_concepts.push_back({c.groups[g].name, static_cast<int>(g), -1});
    for (std::size_t i = 0; i < c.ingredients.size(); ++i)
        if (c.ingredients[i].group < 0) c.top_concepts.push_back({c.ingredients[i].name, -1, static_cast<int>(i)});

    for (std::size_t g = 0; g < c.groups.size(); ++g) {
        const int top = c.top_concept_of_group(static_cast<int>(g));
        for (int m : c.groups[g].members)
            c.bank.push_back({c.ingredients[static_cast<std::size_t>(m)].name, BankLevel::sub, m, 0, top, -1});
    }
    const std::size_t subs = c.bank.size();
    for (std::size_t b = 0; b < subs; ++b) {
        const auto& sub = c.bank[b];
        const int count = c.ingredients[static_cast<std::size_t>(sub.ingredient)].variant_count;
        for (int v = 1; v <= count; ++v)
            c.bank.push_back({detail::variant_name(sub.name, v), BankLevel::subsub, sub.ingredient, v, sub.top_concept,
                              static_cast<int>(b)});
    }

    for (std::size_t i = 0; i < c.ingredients.size(); ++i) {
        const int count = c.ingredients[i].variant_count;
        if (count == 0)
            c.atoms.push_back({static_cast<int>(i), 0});
        else
            for (int v = 1; v <= count; ++v) c.atoms.push_back({static_cast<int>(i), v});
    }
    return c;
}

inline std::string atom_name(const Catalog& c, int atom) {
    const auto& a = c.atoms.at(static_cast<std::size_t>(atom));
    const auto& name = c.ingredients.at(static_cast<std::size_t>(a.ingredient)).name;
    return a.variant > 0 ? detail::variant_name(name, a.variant) : name;
}

inline nlohmann::json catalog_to_json(const Catalog& c) {
    using nlohmann::json;
    json j;
    j["format"] = "pseudokitchens2-catalog";
    j["version"] = 1;
    auto& ings = j["ingredients"] = json::array();
    for (auto& i : c.ingredients)
        ings.push_back({{"name", i.name}, {"variants", i.variant_count},
                        {"group", i.group >= 0 ? json(c.groups[static_cast<std::size_t>(i.group)].name) : json(nullptr)}});
    auto& groups = j["groups"] = json::array();
    for (auto& g : c.groups) {
        json members = json::array();
        for (int m : g.members) members.push_back(c.ingredients[static_cast<std::size_t>(m)].name);
        groups.push_back({{"name", g.name}, {"members", members}, {"choose_exactly_one", g.choose_exactly_one}});
    }
    auto& recipes = j["recipes"] = json::array();
    for (auto& r : c.recipes) {
        json req = json::array();
        for (auto& q : r.required) {
            if (q.kind == Requirement::Kind::group)
                req.push_back({{"group", c.groups[static_cast<std::size_t>(q.index)].name}});
            else
                req.push_back({{"ingredient", c.ingredients[static_cast<std::size_t>(q.index)].name}, {"variants", q.variants}});
        }
        recipes.push_back({{"name", r.name}, {"required", req}});
    }
    auto& top = j["top_level_concepts"] = json::array();
    for (auto& t : c.top_concepts) top.push_back(t.name);
    auto& bank = j["bank"] = json::array();
    for (auto& b : c.bank)
        bank.push_back({{"name", b.name},
                        {"level", b.level == BankLevel::sub ? "sub" : "subsub"},
                        {"parent_concept", c.top_concepts[static_cast<std::size_t>(b.top_concept)].name},
                        {"parent_bank", b.parent_bank >= 0 ? json(c.bank[static_cast<std::size_t>(b.parent_bank)].name) : json(nullptr)}});
    return j;
}

}  // namespace mlcs::data
