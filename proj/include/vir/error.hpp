#pragma once

#include <stdexcept>
#include <string>

namespace vir {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Dimension / shape mismatches. Message names both offending shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Bad scalar parameters or configuration (gamma out of range, lo >= hi, ...).
class ParamError : public Error {
public:
    using Error::Error;
};

// A weight lookup failed; carries the missing tensor name.
class MissingWeightError : public Error {
public:
    explicit MissingWeightError(std::string name)
        : Error("missing weight tensor: " + name), name_(std::move(name)) {}
    const std::string& name() const { return name_; }

private:
    std::string name_;
};

// Weight-container file errors, one code per failure mode.
enum class StoreErrc {
    bad_magic,
    bad_version,
    bad_manifest,
    payload_length,
    unknown_dtype,
    io,
};

inline const char* store_errc_name(StoreErrc c) {
    switch (c) {
        case StoreErrc::bad_magic: return "bad_magic";
        case StoreErrc::bad_version: return "bad_version";
        case StoreErrc::bad_manifest: return "bad_manifest";
        case StoreErrc::payload_length: return "payload_length";
        case StoreErrc::unknown_dtype: return "unknown_dtype";
        case StoreErrc::io: return "io";
    }
    return "unknown";
}

class StoreError : public Error {
public:
    StoreError(StoreErrc code, const std::string& what)
        : Error(std::string(store_errc_name(code)) + ": " + what), code_(code) {}
    StoreErrc code() const { return code_; }

private:
    StoreErrc code_;
};

}  // namespace vir
