"""Scale-invariant constellation descriptors for matching sparse 3D landmark clouds."""
from .constellations import Constellation, EnumerationParams, FruitPoint, PointCloud, enumerate_constellations, knn
from .errors import (
    ChecksumError,
    ConstelError,
    DegenerateError,
    DimensionMismatchError,
    InfeasibleSpecError,
    InsufficientMatchesError,
    InsufficientPointsError,
    MalformedMapError,
    MapFormatError,
    NoConsensusError,
    VersionMismatchError,
)
from .geom import RansacParams, SimilarityTransform, procrustes, ransac_transform
from .mapstore import ConstellationMap, MapEntry, build_map, load, query_nearest, save
from .matcher import EvalReport, MatchParams, MatchResult, VoteMatrix, evaluate, localize, match_clouds
from .starhash import CanonicalFrame, Descriptor, canonical_frame, describe, descriptor_distance

__version__ = "0.1.0"

__all__ = [
    "CanonicalFrame",
    "ChecksumError",
    "ConstelError",
    "Constellation",
    "ConstellationMap",
    "DegenerateError",
    "Descriptor",
    "DimensionMismatchError",
    "EnumerationParams",
    "EvalReport",
    "FruitPoint",
    "InfeasibleSpecError",
    "InsufficientMatchesError",
    "InsufficientPointsError",
    "MalformedMapError",
    "MapEntry",
    "MapFormatError",
    "MatchParams",
    "MatchResult",
    "NoConsensusError",
    "PointCloud",
    "RansacParams",
    "SimilarityTransform",
    "VersionMismatchError",
    "VoteMatrix",
    "build_map",
    "canonical_frame",
    "describe",
    "descriptor_distance",
    "enumerate_constellations",
    "evaluate",
    "knn",
    "load",
    "localize",
    "match_clouds",
    "procrustes",
    "query_nearest",
    "ransac_transform",
    "save",
]
