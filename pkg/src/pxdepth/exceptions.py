"""Exception types shared across the package.

Every error carries an ``exit_code`` so the command-line front end can map
failures to process exit codes without a lookup table.
"""


class PxDepthError(Exception):
    exit_code = 1


class ShapeMismatch(PxDepthError, ValueError):
    exit_code = 2


class ConfigError(PxDepthError, ValueError):
    exit_code = 2


class DataError(PxDepthError, ValueError):
    exit_code = 3


class EmptyValidSet(PxDepthError, ValueError):
    exit_code = 3


class DegenerateRange(PxDepthError, ValueError):
    exit_code = 4


class SingularAlignment(PxDepthError, ValueError):
    exit_code = 4


class NonFiniteVelocity(PxDepthError, FloatingPointError):
    exit_code = 4

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"model produced non-finite velocity at sampling step {step}")


class NonFiniteActivation(PxDepthError, FloatingPointError):
    exit_code = 4


class NonFiniteLoss(PxDepthError, FloatingPointError):
    exit_code = 4

    def __init__(self, step, batch_ids):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss at step {step} (batch ids {self.batch_ids})")
