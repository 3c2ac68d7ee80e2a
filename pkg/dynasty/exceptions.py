class DynastyError(Exception):
    """
    Generic class for all Dynasty exceptions.
    """

    pass


class DynastyConfigError(DynastyError):
    """
    Config validation error.

    This error occurs due to validation failures when initialising a `ModelConfig` or `TrainConfig`, or when a value handed to an operation falls outside its documented range.

    Examples:
        - `hidden_dim` is not divisible by `num_heads`.
        - An unknown op kind was passed to `dynasty.tensor.apply`.
        - An unknown ablation toggle was named in an `AblationSpec`.
        - Split fractions leave one of the train/validation/test splits empty.
        - The training and validation splits were normalised with different `NormStats`.
    """

    pass


class DynastyDimensionError(DynastyError):
    """
    Shape validation error.

    This error occurs when the shapes handed to an operation do not conform to its rule. The message names the operation and the shapes involved.

    Examples:
        - `matmul` on a `[2, 3]` and a `[4, 2]` tensor.
        - `X_hist` and `A_hist` disagree on the number of nodes or the history length.
        - Predictions and targets of different shapes were passed to a loss.
    """

    pass


class DynastyContractError(DynastyError):
    """
    Contract violation.

    This error occurs when a call is well-formed but breaks the contract of the operation it targets.

    Examples:
        - `backward` was called on a loss that is not a scalar.
        - `adam_step` found a parameter without a gradient.
        - Teacher-forced or scheduled decoding was requested without targets.
        - A checkpoint was evaluated against a dataset with a different number of nodes.
    """

    pass


class DynastyDeterminismError(DynastyContractError):
    """
    Determinism error.

    This error occurs when `grad_check` evaluates its loss builder twice on identical parameters and receives different values.

    Notes:
        - The usual cause is a builder that draws fresh randomness (e.g. dropout with an unseeded generator) on each call.
    """

    pass


class DynastyNumericalError(DynastyError):
    """
    Numerical error.

    This error occurs when a tensor operation produces NaN or Inf values. Overflow is reported at the operation that caused it, rather than being carried silently through the computation.
    """

    pass


class DynastyDataError(DynastyError):
    """
    Data error.

    This error occurs when input data cannot be turned into a dataset.

    Examples:
        - An edge list covers fewer intervals than `history_len + horizon`.
        - An edge-list CSV is missing one of the `source,target,rating,timestamp` columns.
        - A dataset or checkpoint manifest is malformed or disagrees with its blob.
    """

    pass
