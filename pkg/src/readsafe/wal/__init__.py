from .records import (
    AbortRec,
    BeginRec,
    CommitRec,
    FeedbackMsg,
    RwDeps,
    WalFormatError,
    WalRecord,
    decode,
    dump,
    encode,
    load,
)
