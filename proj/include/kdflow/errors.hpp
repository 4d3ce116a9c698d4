#pragma once

#include <stdexcept>
#include <string>

namespace kdflow {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// tensor / model
struct ShapeError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct ParameterError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// transport
struct ChannelError : Error { using Error::Error; };
struct NameCollisionError : ChannelError { using ChannelError::ChannelError; };
struct NotFoundError : ChannelError { using ChannelError::ChannelError; };
struct MappingError : ChannelError { using ChannelError::ChannelError; };
struct OversizeError : ChannelError { using ChannelError::ChannelError; };
struct CorruptionError : ChannelError { using ChannelError::ChannelError; };
struct PoisonedError : ChannelError { using ChannelError::ChannelError; };
struct ViewLimitError : ChannelError { using ChannelError::ChannelError; };
struct TimeoutError : ChannelError { using ChannelError::ChannelError; };

struct OverflowError : Error { using Error::Error; };

// workflows / cli
struct ConfigError : Error {
    ConfigError(std::string field, const std::string& what)
        : Error("config field '" + field + "': " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

struct DatasetError : Error {
    DatasetError(std::size_t line, const std::string& what)
        : Error("dataset line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct ActorError : Error { using Error::Error; };

}  // namespace kdflow
