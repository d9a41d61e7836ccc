#pragma once

#include <stdexcept>
#include <string>

namespace cotprobe {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Errors caused by bad input or configuration rather than a bug. The CLI maps
// these to exit code 1.
class UserError : public Error {
public:
    using Error::Error;
};

#define COTPROBE_DEFINE_ERROR(Name, Base)  \
    class Name : public Base {             \
    public:                                \
        using Base::Base;                  \
    }

// eqdsl
COTPROBE_DEFINE_ERROR(MalformedEquation, UserError);
COTPROBE_DEFINE_ERROR(DuplicateAssignmentConflict, UserError);
COTPROBE_DEFINE_ERROR(UnknownVariableReference, UserError);
COTPROBE_DEFINE_ERROR(ValueOutOfRange, UserError);
COTPROBE_DEFINE_ERROR(UnresolvableQuery, UserError);
COTPROBE_DEFINE_ERROR(TemplateMismatch, UserError);

// taskgen
COTPROBE_DEFINE_ERROR(ExhaustedSampleSpace, UserError);

// model
COTPROBE_DEFINE_ERROR(UnknownSymbol, UserError);
COTPROBE_DEFINE_ERROR(ContextOverflow, UserError);
COTPROBE_DEFINE_ERROR(PatchOutOfRange, UserError);
COTPROBE_DEFINE_ERROR(BudgetExceeded, Error);
COTPROBE_DEFINE_ERROR(DidNotConverge, Error);
COTPROBE_DEFINE_ERROR(CheckpointError, UserError);
COTPROBE_DEFINE_ERROR(AdapterError, Error);

// probelab
COTPROBE_DEFINE_ERROR(MisalignedPositions, UserError);
COTPROBE_DEFINE_ERROR(DegenerateLabels, UserError);

// metrics
COTPROBE_DEFINE_ERROR(UnknownVariable, UserError);
COTPROBE_DEFINE_ERROR(OutOfRange, UserError);

// patching
COTPROBE_DEFINE_ERROR(GeometryMismatch, UserError);

// cli
COTPROBE_DEFINE_ERROR(MissingArtifact, UserError);
COTPROBE_DEFINE_ERROR(ConfigError, UserError);
COTPROBE_DEFINE_ERROR(SchemaError, UserError);

#undef COTPROBE_DEFINE_ERROR

}  // namespace cotprobe
