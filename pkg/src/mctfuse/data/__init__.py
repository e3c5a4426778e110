from .io import (
    ContainerFormatError,
    ManifestSchemaError,
    ShapeMismatchError,
    TruncatedPayloadError,
    decode_tensor,
    encode_tensor,
    read_dataset,
    read_tensor,
    write_dataset,
    write_tensor,
)
from .synth import (
    ActivityArchetype,
    Dataset,
    GenerationError,
    SplitManifest,
    SynthConfig,
    SyntheticSample,
    build_protocol_splits,
    generate_archetypes,
    generate_dataset,
    synthesize_sample,
)

__all__ = [
    "ActivityArchetype", "ContainerFormatError", "Dataset", "GenerationError", "ManifestSchemaError",
    "ShapeMismatchError", "SplitManifest", "SynthConfig", "SyntheticSample", "TruncatedPayloadError",
    "build_protocol_splits", "decode_tensor", "encode_tensor", "generate_archetypes", "generate_dataset", "read_dataset", "read_tensor",
    "synthesize_sample", "write_dataset", "write_tensor",
]
