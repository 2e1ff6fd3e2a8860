#pragma once

#include <stdexcept>
#include <string>

namespace ctf {

// Error categories map onto CLI exit codes: usage -> 2, validation-style
// (shape/param/index/format/config) -> 3, runtime (train/sample/io) -> 1.
enum class ErrKind {
    shape,
    param,
    index,
    format,
    config,
    train,
    sample,
    io,
    usage,
};

inline const char* err_kind_name(ErrKind k) {
    switch (k) {
        case ErrKind::shape:  return "shape";
        case ErrKind::param:  return "param";
        case ErrKind::index:  return "index";
        case ErrKind::format: return "format";
        case ErrKind::config: return "config";
        case ErrKind::train:  return "train";
        case ErrKind::sample: return "sample";
        case ErrKind::io:     return "io";
        case ErrKind::usage:  return "usage";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrKind kind, const std::string& msg)
        : std::runtime_error(std::string(err_kind_name(kind)) + " error: " + msg), kind_(kind) {}

    ErrKind kind() const { return kind_; }

private:
    ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void check(bool cond, ErrKind kind, const std::string& msg) {
    if (!cond) {
        fail(kind, msg);
    }
}

}  // namespace ctf
