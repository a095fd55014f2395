"""Exception hierarchy. Each family maps to one CLI exit code."""


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 1


class DataError(PipelineError):
    exit_code = 2


class CheckpointError(DataError):
    pass


class TrainingError(PipelineError):
    exit_code = 3


class EvaluationError(PipelineError):
    exit_code = 4
