class PolicySensitivityError(Exception):
    """
    Base class for every error raised by the package.

    Subclasses carry a ``message`` template; keyword arguments passed to the
    constructor are formatted into it and kept on the instance as ``params``.
    """
    message = "{detail}"

    def __init__(self, detail=None, **params):
        if detail is not None:
            params.setdefault("detail", detail)
        self.params = params
        try:
            text = self.message.format(**params)
        except (KeyError, IndexError):
            text = detail if detail is not None else self.message
        super().__init__(text)


class ValidationError(PolicySensitivityError):
    pass


class SchemaError(ValidationError):
    pass


class ParseError(ValidationError):
    message = "Row {row}, column {column}: cannot parse {value!r}."


class ConfigError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class DomainError(ValidationError, ValueError):
    pass


class AlignmentError(ValidationError):
    message = "{what} has {got} units but the dataset has {expected}."


class EmptyGroupError(ValidationError):
    message = "Subgroup {name} contains no units."


class DegenerateTargetError(ValidationError):
    message = "Target {target} takes the single value {value} on {n} units; both classes are required."


class CalibrationError(PolicySensitivityError):
    message = "Cannot calibrate {name}: target {target} is unreachable (reached {lower} to {upper})."


class InitializationError(PolicySensitivityError):
    message = "Chain {chain}: log density not finite after {attempts} initialisations."


class ConvergenceError(PolicySensitivityError):
    pass


class ArtifactIOError(PolicySensitivityError):
    message = "Cannot {action} {path}: {reason}"


class MissingArtifactError(PolicySensitivityError):
    message = "Artifact {name} not found in {directory}; run `policy-sensitivity {command}` first."
