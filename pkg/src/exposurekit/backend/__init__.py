from .service import (
    AuthorizationError,
    CodeRejected,
    DiagnosisServer,
    OneTimeCode,
    PublishedTEKBatch,
)

__all__ = ["AuthorizationError", "CodeRejected", "DiagnosisServer", "OneTimeCode", "PublishedTEKBatch"]
