"""dtap: a decoupled trigger-action platform toolkit.

The cloud that executes recipes is untrusted by construction: it only ever
holds recipe-specific tokens, and action services execute a function only
when presented with a fresh, correctly signed trigger blob that matches the
recipe fixed at setup time.
"""

from .errors import DtapError
from .protocol import (
    FunctionSpec,
    ParamBinding,
    RecipeActionGrant,
    RecipeTriggerGrant,
    ScopeMap,
    ServiceIdentity,
    TriggerBlob,
    XToken,
    canonical_encode,
    new_token,
    resolve_params,
)
from .predicate import eval_predicate, parse_predicate, predicate_to_text

__version__ = "0.1.0"

__all__ = [
    "DtapError",
    "FunctionSpec",
    "ParamBinding",
    "RecipeActionGrant",
    "RecipeTriggerGrant",
    "ScopeMap",
    "ServiceIdentity",
    "TriggerBlob",
    "XToken",
    "canonical_encode",
    "eval_predicate",
    "new_token",
    "parse_predicate",
    "predicate_to_text",
    "resolve_params",
    "__version__",
]
