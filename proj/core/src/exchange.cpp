#include "fedcspc/exchange.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "fedcspc/error.hpp"
#include "text_util.hpp"

namespace fedcspc {

namespace {

constexpr const char* kHeader = "# fedcspc-exchange 1";

template <typename Fn>
void for_each_record(std::istream& in, Fn&& fn) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto body = detail::trim(line);
        if (body.empty() || body.front() == '#') continue;
        fn(detail::split(body, ','), lineno);
    }
}

std::size_t id_field(std::string_view s, std::size_t line) {
    auto v = detail::parse_int<std::size_t>(s);
    if (!v) throw ParseError("bad id '" + std::string(s) + "'", line);
    return *v;
}

std::vector<double> value_fields(const std::vector<std::string_view>& f, std::size_t from, std::size_t line) {
    if (f.size() <= from) throw ParseError("record has no vector values", line);
    std::vector<double> v;
    for (std::size_t i = from; i < f.size(); ++i) {
        auto d = detail::parse_double(f[i]);
        if (!d) throw ParseError("non-numeric value '" + std::string(f[i]) + "'", line);
        v.push_back(*d);
    }
    return v;
}

void write_values(std::ostream& out, const std::vector<double>& v) {
    for (double x : v) out << ',' << detail::format_double(x);
    out << '\n';
}

}  // namespace

void write_prototypes(std::ostream& out, const std::vector<Prototype>& prototypes) {
    out << kHeader << '\n';
    for (const auto& p : prototypes) {
        out << "prototype," << p.client_id << ',' << p.class_id << ',' << p.cluster_id << ',' << p.repeat_id;
        write_values(out, p.vector);
    }
}

std::vector<Prototype> read_prototypes(std::istream& in) {
    std::vector<Prototype> out;
    for_each_record(in, [&](const std::vector<std::string_view>& f, std::size_t line) {
        if (f[0] != "prototype") throw ParseError("expected a prototype record", line);
        if (f.size() < 6) throw ParseError("prototype record too short", line);
        Prototype p;
        p.client_id = id_field(f[1], line);
        p.class_id = id_field(f[2], line);
        p.cluster_id = id_field(f[3], line);
        p.repeat_id = id_field(f[4], line);
        p.vector = value_fields(f, 5, line);
        if (!out.empty() && out.front().vector.size() != p.vector.size())
            throw ParseError("prototype dimension differs from the first record", line);
        out.push_back(std::move(p));
    });
    return out;
}

void write_class_vectors(std::ostream& out, const ClassVectors& vectors, const char* kind) {
    out << kHeader << '\n';
    for (const auto& [cls, v] : vectors) {
        out << kind << ',' << cls;
        write_values(out, v);
    }
}

ClassVectors read_class_vectors(std::istream& in, const char* kind) {
    ClassVectors out;
    for_each_record(in, [&](const std::vector<std::string_view>& f, std::size_t line) {
        if (f[0] != kind) throw ParseError("expected a '" + std::string(kind) + "' record", line);
        auto cls = id_field(f.size() > 1 ? f[1] : std::string_view{}, line);
        if (!out.emplace(cls, value_fields(f, 2, line)).second)
            throw ParseError("duplicate class " + std::to_string(cls), line);
    });
    return out;
}

void save_prototypes(const std::filesystem::path& path, const std::vector<Prototype>& prototypes) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_prototypes(out, prototypes);
}

std::vector<Prototype> load_prototypes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return read_prototypes(in);
}

void save_class_vectors(const std::filesystem::path& path, const ClassVectors& vectors, const char* kind) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_class_vectors(out, vectors, kind);
}

ClassVectors load_class_vectors(const std::filesystem::path& path, const char* kind) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return read_class_vectors(in, kind);
}

}  // namespace fedcspc
