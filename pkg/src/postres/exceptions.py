"""Exception hierarchy.

Input problems (bad columns, degenerate arms) derive from :class:`InputError`;
solver failures derive from :class:`NumericalError`.  The CLI maps the two
families to exit codes 2 and 3.
"""


class PostresError(Exception):
    pass


class InputError(PostresError, ValueError):
    pass


class NumericalError(PostresError, ArithmeticError):
    pass


class ValidationError(InputError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ColumnMismatch(InputError):
    pass


class DegenerateArm(InputError):
    pass


class EmptyFitSubset(InputError):
    pass


class PoolTooSmall(InputError):
    pass


class Separation(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class Infeasible(NumericalError):
    pass
