#pragma once

#include <stdexcept>
#include <string>

namespace socioverse {

// Base for every error the library raises on bad input or failed preconditions.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A record or file that does not decode or does not validate.
class FormatError : public Error {
public:
    FormatError(std::string source, std::size_t line, const std::string& what)
        : Error(source.empty() ? fmt_line(line, what) : source + ":" + fmt_line(line, what)),
          source_(std::move(source)),
          line_(line) {}
    explicit FormatError(const std::string& what) : Error(what) {}

    const std::string& source() const noexcept { return source_; }
    // 1-based; 0 when the error is not tied to a line.
    std::size_t line() const noexcept { return line_; }

private:
    static std::string fmt_line(std::size_t line, const std::string& what) {
        return line == 0 ? what : "line " + std::to_string(line) + ": " + what;
    }

    std::string source_;
    std::size_t line_ = 0;
};

}  // namespace socioverse
