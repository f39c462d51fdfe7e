"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its uniform exit statuses (2 I/O or parse, 3 validation, 4 numerical).
"""


class BoxTemplateError(Exception):
    exit_code = 1


class InputError(BoxTemplateError, ValueError):
    """Malformed arguments or unreadable input."""

    exit_code = 2


class ParseError(InputError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class ValidationError(BoxTemplateError, ValueError):
    exit_code = 3

    def __init__(self, message, violations=(), template_id=None):
        super().__init__(message)
        self.violations = list(violations)
        self.template_id = template_id


class NumericalError(BoxTemplateError, ArithmeticError):
    exit_code = 4


class EmptyCloud(InputError):
    pass


class EmptyList(InputError):
    pass


class EmptyTemplate(InputError):
    pass


class BadResolution(InputError):
    pass


class InvalidTemplate(ValidationError):
    pass


class LengthMismatch(InputError):
    pass


class BadDimension(InputError):
    pass


class BadConfig(InputError):
    pass


class NoRestarts(BadConfig):
    pass


class NoCandidates(InputError):
    pass


class UnknownFamily(ValidationError):
    pass


class UnknownTemplate(ValidationError):
    pass


class DimensionMismatch(InputError):
    pass


class EmptyInput(InputError):
    pass


class TemplateMismatch(ValidationError):
    pass


class EmptyClusters(InputError):
    pass


class DegenerateScan(NumericalError):
    pass


class BadLabels(InputError):
    pass


class EmptyDataset(InputError):
    pass


class BadK(InputError):
    pass


class BoxCountMismatch(InputError):
    pass


class DegenerateSourceBox(UserWarning):
    """Warned when a source box has a zero edge; that axis ratio falls back to 1."""
