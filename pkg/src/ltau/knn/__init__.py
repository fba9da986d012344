from ltau.knn.index import (
    FlatIndex,
    HnswIndex,
    HnswParams,
    IndexFormatError,
    NeighborList,
    assign_levels,
    batch_search,
    build_flat,
    build_hnsw,
    deserialize_index,
    search_flat,
    search_hnsw,
    serialize_index,
    splitmix64,
)

__all__ = [
    "FlatIndex",
    "HnswIndex",
    "HnswParams",
    "IndexFormatError",
    "NeighborList",
    "assign_levels",
    "batch_search",
    "build_flat",
    "build_hnsw",
    "deserialize_index",
    "search_flat",
    "search_hnsw",
    "serialize_index",
    "splitmix64",
]
