"""Python access to the phantom generator, trained translators and metrics."""

# libtorch's shared libraries come from the torch wheel; load them first.
import torch  # noqa: F401

from ._icam import (  # noqa: F401
    Error,
    Model,
    __version__,
    config_hash,
    correlation_p_value,
    generate_dataset,
    generate_sample,
    ncc,
    pearson,
    read_tensor,
    spearman,
)
