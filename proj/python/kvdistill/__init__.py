from ._core import (
    EmbeddingBank,
    Episode,
    KvdistillError,
    Student,
    SyntheticSpec,
    ablation_arms,
    default_config,
    evaluate,
    gen_synthetic,
    load_bank,
    load_student,
    sample_episode,
    save_bank,
    student_file_size,
    train,
)

__all__ = [
    "EmbeddingBank",
    "Episode",
    "KvdistillError",
    "Student",
    "SyntheticSpec",
    "ablation_arms",
    "default_config",
    "evaluate",
    "gen_synthetic",
    "load_bank",
    "load_student",
    "sample_episode",
    "save_bank",
    "student_file_size",
    "train",
]
