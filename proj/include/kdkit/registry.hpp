#pragma once

#include <any>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kdkit/config.hpp"

namespace kdkit {

// A value built from an !import_call node: the registry key it came from,
// the component-kind label, and the constructed object.
struct Component {
    std::string key;
    std::string kind;
    std::any value;
};

// Result of resolving a config node: scalars and containers pass through
// structurally, tagged nodes become components (or aliased values).
class Resolved {
public:
    enum class Kind { null_v, boolean, integer, floating, string, sequence, mapping, component };

    Resolved() = default;

    static Resolved null() { return Resolved(); }
    static Resolved boolean(bool b) {
        Resolved v;
        v.kind_ = Kind::boolean;
        v.bool_ = b;
        return v;
    }
    static Resolved integer(long long i) {
        Resolved v;
        v.kind_ = Kind::integer;
        v.int_ = i;
        return v;
    }
    static Resolved floating(double f) {
        Resolved v;
        v.kind_ = Kind::floating;
        v.float_ = f;
        return v;
    }
    static Resolved str(std::string s) {
        Resolved v;
        v.kind_ = Kind::string;
        v.str_ = std::move(s);
        return v;
    }
    static Resolved sequence(std::vector<Resolved> items = {}) {
        Resolved v;
        v.kind_ = Kind::sequence;
        v.items_ = std::move(items);
        return v;
    }
    static Resolved mapping(std::vector<std::pair<std::string, Resolved>> entries = {}) {
        Resolved v;
        v.kind_ = Kind::mapping;
        v.entries_ = std::move(entries);
        return v;
    }
    static Resolved component(Component c) {
        Resolved v;
        v.kind_ = Kind::component;
        v.component_ = std::make_shared<Component>(std::move(c));
        return v;
    }

    Kind kind() const { return kind_; }
    bool is_null() const { return kind_ == Kind::null_v; }
    bool is_bool() const { return kind_ == Kind::boolean; }
    bool is_int() const { return kind_ == Kind::integer; }
    bool is_float() const { return kind_ == Kind::floating; }
    bool is_string() const { return kind_ == Kind::string; }
    bool is_sequence() const { return kind_ == Kind::sequence; }
    bool is_mapping() const { return kind_ == Kind::mapping; }
    bool is_component() const { return kind_ == Kind::component; }
    bool is_number() const { return kind_ == Kind::integer || kind_ == Kind::floating; }

    bool as_bool() const {
        expect(Kind::boolean, "boolean");
        return bool_;
    }
    long long as_int() const {
        expect(Kind::integer, "integer");
        return int_;
    }
    // the one permitted coercion: int widens to float
    double number() const {
        if (kind_ == Kind::integer) return static_cast<double>(int_);
        expect(Kind::floating, "number");
        return float_;
    }
    const std::string& as_string() const {
        expect(Kind::string, "string");
        return str_;
    }
    const std::vector<Resolved>& items() const {
        expect(Kind::sequence, "sequence");
        return items_;
    }
    const std::vector<std::pair<std::string, Resolved>>& entries() const {
        expect(Kind::mapping, "mapping");
        return entries_;
    }
    const Resolved* find(const std::string& key) const {
        expect(Kind::mapping, "mapping");
        for (const auto& [k, v] : entries_) {
            if (k == key) return &v;
        }
        return nullptr;
    }
    const Resolved& at(const std::string& key) const {
        const Resolved* v = find(key);
        if (!v) throw ConfigError("missing key '" + key + "'");
        return *v;
    }
    const Component& component() const {
        expect(Kind::component, "component");
        return *component_;
    }

    const char* kind_name() const {
        switch (kind_) {
            case Kind::null_v: return "null";
            case Kind::boolean: return "boolean";
            case Kind::integer: return "integer";
            case Kind::floating: return "float";
            case Kind::string: return "string";
            case Kind::sequence: return "sequence";
            case Kind::mapping: return "mapping";
            case Kind::component: return "component";
        }
        return "?";
    }

private:
    void expect(Kind k, const char* what) const {
        if (kind_ != k) {
            throw ConfigError(std::string("expected ") + what + ", got " + kind_name());
        }
    }

    Kind kind_ = Kind::null_v;
    bool bool_ = false;
    long long int_ = 0;
    double float_ = 0.0;
    std::string str_;
    std::vector<Resolved> items_;
    std::vector<std::pair<std::string, Resolved>> entries_;
    std::shared_ptr<Component> component_;  // shared so aliases stay identical
};

// Typed access to one builder invocation's arguments. Getters mark what
// they consume; finish() rejects anything left over, so misspelled or
// surplus keyword arguments fail loudly.
class ArgsView {
public:
    ArgsView(std::string key, std::vector<Resolved> args,
             std::vector<std::pair<std::string, Resolved>> kwargs)
        : key_(std::move(key)), args_(std::move(args)), kwargs_(std::move(kwargs)) {
        args_used_.assign(args_.size(), false);
        kwargs_used_.assign(kwargs_.size(), false);
    }

    const std::string& key() const { return key_; }
    std::size_t arg_count() const { return args_.size(); }

    const Resolved& arg(std::size_t i) {
        if (i >= args_.size()) {
            fail("missing positional argument " + std::to_string(i));
        }
        args_used_[i] = true;
        return args_[i];
    }

    const Resolved* find(const std::string& name) {
        for (std::size_t i = 0; i < kwargs_.size(); ++i) {
            if (kwargs_[i].first == name) {
                kwargs_used_[i] = true;
                return &kwargs_[i].second;
            }
        }
        return nullptr;
    }

    const Resolved& require(const std::string& name) {
        const Resolved* v = find(name);
        if (!v) fail("missing argument '" + name + "'");
        return *v;
    }

    long long require_int(const std::string& name) { return as_int(name, require(name)); }
    double require_number(const std::string& name) { return as_number(name, require(name)); }
    bool require_bool(const std::string& name) { return as_bool(name, require(name)); }
    std::string require_string(const std::string& name) { return as_string(name, require(name)); }

    long long int_or(const std::string& name, long long dflt) {
        const Resolved* v = find(name);
        return v ? as_int(name, *v) : dflt;
    }
    double number_or(const std::string& name, double dflt) {
        const Resolved* v = find(name);
        return v ? as_number(name, *v) : dflt;
    }
    bool bool_or(const std::string& name, bool dflt) {
        const Resolved* v = find(name);
        return v ? as_bool(name, *v) : dflt;
    }
    std::string string_or(const std::string& name, const std::string& dflt) {
        const Resolved* v = find(name);
        return v ? as_string(name, *v) : dflt;
    }

    std::vector<double> number_seq(const std::string& name) {
        return to_number_seq(name, require(name));
    }
    std::vector<double> number_seq_or(const std::string& name, std::vector<double> dflt) {
        const Resolved* v = find(name);
        return v ? to_number_seq(name, *v) : std::move(dflt);
    }
    std::vector<long long> int_seq(const std::string& name) {
        const Resolved& v = require(name);
        if (!v.is_sequence()) {
            fail("argument '" + name + "' expects a sequence, got " + v.kind_name());
        }
        std::vector<long long> out;
        for (const auto& item : v.items()) out.push_back(as_int(name, item));
        return out;
    }

    const Component& require_component(const std::string& name, const std::string& kind = "") {
        const Resolved& v = require(name);
        if (!v.is_component()) {
            fail("argument '" + name + "' expects a component, got " + v.kind_name());
        }
        if (!kind.empty() && v.component().kind != kind) {
            fail("argument '" + name + "' expects a " + kind + " component, got " +
                 v.component().kind + " '" + v.component().key + "'");
        }
        return v.component();
    }

    template <class T>
    std::shared_ptr<T> component_ptr(const std::string& name, const std::string& kind) {
        const Component& c = require_component(name, kind);
        auto* p = std::any_cast<std::shared_ptr<T>>(&c.value);
        if (!p) fail("component '" + c.key + "' has an unexpected value type");
        return *p;
    }

    template <class T>
    std::vector<std::shared_ptr<T>> component_seq(const std::string& name,
                                                  const std::string& kind) {
        const Resolved& v = require(name);
        if (!v.is_sequence()) {
            fail("argument '" + name + "' expects a sequence, got " + v.kind_name());
        }
        std::vector<std::shared_ptr<T>> out;
        for (const auto& item : v.items()) {
            if (!item.is_component() || (!kind.empty() && item.component().kind != kind)) {
                fail("argument '" + name + "' expects " + kind + " components");
            }
            auto* p = std::any_cast<std::shared_ptr<T>>(&item.component().value);
            if (!p) fail("component '" + item.component().key + "' has an unexpected value type");
            out.push_back(*p);
        }
        return out;
    }

    void finish() {
        std::string extras;
        for (std::size_t i = 0; i < kwargs_.size(); ++i) {
            if (!kwargs_used_[i]) extras += (extras.empty() ? "'" : ", '") + kwargs_[i].first + "'";
        }
        if (!extras.empty()) fail("unexpected argument(s) " + extras);
        for (std::size_t i = 0; i < args_.size(); ++i) {
            if (!args_used_[i]) {
                fail("too many positional arguments (" + std::to_string(args_.size()) + " given)");
            }
        }
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError("'" + key_ + "': " + msg);
    }

private:
    long long as_int(const std::string& name, const Resolved& v) const {
        if (!v.is_int()) fail("argument '" + name + "' expects an integer, got " + v.kind_name());
        return v.as_int();
    }
    double as_number(const std::string& name, const Resolved& v) const {
        if (!v.is_number()) fail("argument '" + name + "' expects a number, got " + v.kind_name());
        return v.number();
    }
    bool as_bool(const std::string& name, const Resolved& v) const {
        if (!v.is_bool()) fail("argument '" + name + "' expects a boolean, got " + v.kind_name());
        return v.as_bool();
    }
    std::string as_string(const std::string& name, const Resolved& v) const {
        if (!v.is_string()) fail("argument '" + name + "' expects a string, got " + v.kind_name());
        return v.as_string();
    }

    std::vector<double> to_number_seq(const std::string& name, const Resolved& v) {
        if (!v.is_sequence()) {
            fail("argument '" + name + "' expects a sequence, got " + v.kind_name());
        }
        std::vector<double> out;
        for (const auto& item : v.items()) {
            if (!item.is_number()) {
                fail("argument '" + name + "' expects numbers, got " + item.kind_name());
            }
            out.push_back(item.number());
        }
        return out;
    }

    std::string key_;
    std::vector<Resolved> args_;
    std::vector<std::pair<std::string, Resolved>> kwargs_;
    std::vector<bool> args_used_, kwargs_used_;
};

using Builder = std::function<std::any(ArgsView&)>;

class Registry {
public:
    struct Entry {
        std::string kind;
        Builder builder;
    };

    void add(const std::string& key, const std::string& kind, Builder builder) {
        if (key.empty()) throw ConfigError("registry key must be non-empty");
        if (entries_.count(key)) throw ConfigError("duplicate registry key '" + key + "'");
        entries_[key] = Entry{kind, std::move(builder)};
        order_.push_back(key);
    }

    bool contains(const std::string& key) const { return entries_.count(key) > 0; }

    const Entry& lookup(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError("unknown registry key '" + key + "'");
        return it->second;
    }

    const std::vector<std::string>& keys() const { return order_; }

private:
    std::unordered_map<std::string, Entry> entries_;
    std::vector<std::string> order_;
};

// Walks a parsed config depth-first post-order, replacing !import_call
// nodes with built components and !ref nodes with the value already built
// (or built on demand) at the referenced dot path. Every mapping entry is
// memoized under its path, so two references to one path share one object.
class Instantiator {
public:
    Instantiator(const ConfigValue& root, const Registry& registry)
        : root_(&root), registry_(&registry) {}

    Resolved resolve() { return eval(*root_, ""); }

    Resolved resolve_path(const std::string& path) {
        auto it = cache_.find(path);
        if (it != cache_.end()) return it->second;
        if (in_progress_.count(path)) {
            throw ConfigError("cycle detected among references through '" + path + "'");
        }
        const ConfigValue* node = find_config_path(*root_, path);
        if (!node) throw ConfigError("reference to undefined path '" + path + "'");
        in_progress_.insert(path);
        Resolved r = eval(*node, path);
        in_progress_.erase(path);
        cache_.emplace(path, r);
        return r;
    }

    // one line per !import_call, in construction order
    const std::vector<std::string>& records() const { return records_; }

private:
    static std::string child_path(const std::string& base, const std::string& key) {
        return base.empty() ? key : base + "." + key;
    }

    Resolved eval(const ConfigValue& node, const std::string& path) {
        switch (node.kind()) {
            case ConfigValue::Kind::null_v: return Resolved::null();
            case ConfigValue::Kind::boolean: return Resolved::boolean(node.as_bool());
            case ConfigValue::Kind::integer: return Resolved::integer(node.as_int());
            case ConfigValue::Kind::floating: return Resolved::floating(node.as_float());
            case ConfigValue::Kind::string: return Resolved::str(node.as_string());
            case ConfigValue::Kind::sequence: {
                std::vector<Resolved> items;
                for (std::size_t i = 0; i < node.items().size(); ++i) {
                    items.push_back(
                        eval_cached(node.items()[i], child_path(path, std::to_string(i))));
                }
                return Resolved::sequence(std::move(items));
            }
            case ConfigValue::Kind::mapping: {
                std::vector<std::pair<std::string, Resolved>> entries;
                for (const auto& [key, value] : node.entries()) {
                    entries.emplace_back(key, eval_cached(value, child_path(path, key)));
                }
                return Resolved::mapping(std::move(entries));
            }
            case ConfigValue::Kind::tagged: {
                if (node.tag() == "ref") return eval_ref(node);
                return eval_import_call(node, path);
            }
        }
        throw Error("unreachable config node kind");
    }

    Resolved eval_cached(const ConfigValue& node, const std::string& path) {
        auto it = cache_.find(path);
        if (it != cache_.end()) return it->second;
        in_progress_.insert(path);
        Resolved r = eval(node, path);
        in_progress_.erase(path);
        cache_.emplace(path, r);
        return r;
    }

    Resolved eval_ref(const ConfigValue& node) {
        const ConfigValue& payload = node.payload();
        if (!payload.is_string()) {
            throw ConfigError(node.where() + "!ref expects a dot path");
        }
        return resolve_path(payload.as_string());
    }

    Resolved eval_import_call(const ConfigValue& node, const std::string& path) {
        const ConfigValue& payload = node.payload();
        if (!payload.is_mapping()) {
            throw ConfigError(node.where() + "!import_call expects a mapping with a 'key'");
        }
        std::string key;
        const ConfigValue* init = nullptr;
        for (const auto& [k, v] : payload.entries()) {
            if (k == "key") {
                if (!v.is_string()) throw ConfigError(v.where() + "'key' must be a string");
                key = v.as_string();
            } else if (k == "init") {
                init = &v;
            } else {
                throw ConfigError(node.where() + "unexpected '" + k + "' in !import_call");
            }
        }
        if (key.empty()) throw ConfigError(node.where() + "!import_call needs a non-empty 'key'");

        std::vector<Resolved> args;
        std::vector<std::pair<std::string, Resolved>> kwargs;
        if (init && !init->is_null()) {
            if (!init->is_mapping()) {
                throw ConfigError(init->where() + "'init' must be a mapping or empty");
            }
            for (const auto& [k, v] : init->entries()) {
                if (k == "args") {
                    if (!v.is_sequence()) throw ConfigError(v.where() + "'args' must be a sequence");
                    for (std::size_t i = 0; i < v.items().size(); ++i) {
                        args.push_back(eval_cached(
                            v.items()[i], child_path(path, "init.args." + std::to_string(i))));
                    }
                } else if (k == "kwargs") {
                    if (!v.is_mapping()) throw ConfigError(v.where() + "'kwargs' must be a mapping");
                    for (const auto& [name, arg] : v.entries()) {
                        kwargs.emplace_back(
                            name, eval_cached(arg, child_path(path, "init.kwargs." + name)));
                    }
                } else {
                    throw ConfigError(init->where() + "unexpected '" + k + "' in 'init'");
                }
            }
        }

        const Registry::Entry& entry = registry_->lookup(key);
        ArgsView view(key, std::move(args), std::move(kwargs));
        std::any value = entry.builder(view);
        records_.push_back("[" + entry.kind + "] " + key +
                           (path.empty() ? "" : " at " + path));
        return Resolved::component(Component{key, entry.kind, std::move(value)});
    }

    const ConfigValue* root_;
    const Registry* registry_;
    std::unordered_map<std::string, Resolved> cache_;
    std::set<std::string> in_progress_;
    std::vector<std::string> records_;
};

inline Resolved instantiate(const ConfigValue& node, const Registry& registry) {
    Instantiator inst(node, registry);
    return inst.resolve();
}

}  // namespace kdkit
