"""`dtap` command-line client.

Configuration comes from one TOML file plus environment overrides, so every
prompt can be avoided in scripts:

    DTAP_CONFIG      path to the config file (default ~/.dtap/config.toml)
    DTAP_VAULT_PATH  vault file location
    DTAP_PASSPHRASE  vault passphrase (otherwise prompted once)
    DTAP_PASSWORD    service password for `connect` (otherwise prompted)
    DTAP_CLOUD_URL   recipe cloud base URL

Config file shape:

    [client]
    vault_path = "~/.dtap/vault.bin"
    cloud_url = "http://127.0.0.1:9300"

    [vault]
    scrypt_n = 16384
"""

from __future__ import annotations

import argparse
import getpass
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .client import DtapClient
from .errors import DtapError
from .protocol import ParamBinding

DEFAULT_CONFIG = "~/.dtap/config.toml"
DEFAULT_VAULT = "~/.dtap/vault.bin"


def load_config(path: str | None) -> dict:
    candidate = path or os.environ.get("DTAP_CONFIG") or DEFAULT_CONFIG
    expanded = Path(candidate).expanduser()
    if not expanded.exists():
        if path is not None:
            raise DtapError(f"config file not found: {expanded}")
        return {}
    with expanded.open("rb") as fh:
        return tomllib.load(fh)


def _passphrase() -> str:
    env = os.environ.get("DTAP_PASSPHRASE")
    if env is not None:
        return env
    return getpass.getpass("vault passphrase: ")


def _client(args, config: dict) -> DtapClient:
    client_cfg = config.get("client", {})
    vault_cfg = config.get("vault", {})
    vault_path = (
        args.vault
        or os.environ.get("DTAP_VAULT_PATH")
        or client_cfg.get("vault_path")
        or DEFAULT_VAULT
    )
    cloud_url = (
        getattr(args, "cloud", None)
        or os.environ.get("DTAP_CLOUD_URL")
        or client_cfg.get("cloud_url")
    )
    return DtapClient(
        Path(vault_path).expanduser(),
        _passphrase(),
        cloud_url=cloud_url,
        scrypt_n=int(vault_cfg.get("scrypt_n", 2**14)),
    )


def _parse_bindings(literals: list[str], from_trigger: list[str]) -> list[ParamBinding]:
    bindings: list[ParamBinding] = []
    for item in literals or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise DtapError(f"--literal expects name=value, got {item!r}")
        bindings.append(ParamBinding(name, literal=value))
    for item in from_trigger or []:
        name, sep, fieldname = item.partition("=")
        if not sep:
            raise DtapError(f"--from-trigger expects name=field, got {item!r}")
        bindings.append(ParamBinding(name, trigger_field=fieldname))
    return bindings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtap", description="trusted trigger-action client")
    parser.add_argument("--config", help="config file path")
    parser.add_argument("--vault", help="vault file path override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("signup", help="fetch and pin a service's signed scope map")
    p.add_argument("--service", required=True, help="service base URL")
    p.add_argument("--trust-new-key", action="store_true")

    p = sub.add_parser("connect", help="connect a channel and store its XToken")
    p.add_argument("--service", required=True, help="service base URL or id")
    p.add_argument("--user", required=True)
    p.add_argument("--functions", help="comma-separated subset to include in the XToken")

    recipe = sub.add_parser("recipe", help="recipe lifecycle").add_subparsers(
        dest="recipe_command", required=True
    )
    p = recipe.add_parser("create")
    p.add_argument("--trigger-service", required=True)
    p.add_argument("--trigger-function", required=True)
    p.add_argument("--action-service", required=True)
    p.add_argument("--action-function", required=True)
    p.add_argument("--literal", action="append", default=[], metavar="NAME=VALUE")
    p.add_argument(
        "--from-trigger", action="append", default=[], metavar="NAME=FIELD",
        help="bind an action param to a trigger-data field",
    )
    p.add_argument("--predicate", help="condition over trigger data")
    p.add_argument("--mode", choices=["callback", "poll"], default="callback")
    p.add_argument("--poll-interval", type=int, default=900)
    p.add_argument("--description")
    p.add_argument("--cloud", help="cloud base URL")
    p = recipe.add_parser("delete")
    p.add_argument("--id", required=True)
    recipe.add_parser("list")

    vault = sub.add_parser("vault", help="vault portability").add_subparsers(
        dest="vault_command", required=True
    )
    p = vault.add_parser("export")
    p.add_argument("--out", required=True)
    p = vault.add_parser("import")
    p.add_argument("--in", dest="infile", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        client = _client(args, config)
        if args.command == "signup":
            scope_map = client.signup_channel(args.service, args.trust_new_key)
            print(f"signed up {scope_map.service_id}: "
                  f"{', '.join(sorted(scope_map.function_names))}")
        elif args.command == "connect":
            password = os.environ.get("DTAP_PASSWORD")
            functions = (
                set(args.functions.split(",")) if args.functions else None
            )
            xtoken = client.connect_channel(args.service, args.user, password, functions)
            print(f"connected {xtoken.service_id} for {xtoken.user_id} "
                  f"({len(xtoken.permitted_functions)} functions)")
        elif args.command == "recipe" and args.recipe_command == "create":
            recipe_id = client.create_recipe(
                args.trigger_service,
                args.trigger_function,
                args.action_service,
                args.action_function,
                _parse_bindings(args.literal, args.from_trigger),
                predicate_text=args.predicate,
                cloud_url=args.cloud,
                mode=args.mode,
                poll_interval_s=args.poll_interval,
                description=args.description,
            )
            print(recipe_id)
        elif args.command == "recipe" and args.recipe_command == "delete":
            report = client.delete_recipe(args.id)
            print(
                "deleted: trigger_revoked={trigger_revoked} "
                "action_revoked={action_revoked} cloud_deleted={cloud_deleted}".format(**report)
            )
        elif args.command == "recipe" and args.recipe_command == "list":
            for row in client.list_recipes():
                print(f"{row['recipe_id']}  {row['description']}")
        elif args.command == "vault" and args.vault_command == "export":
            client.export_vault(args.out)
            print(f"exported vault to {args.out}")
        elif args.command == "vault" and args.vault_command == "import":
            client.import_vault(args.infile)
            print(f"imported vault from {args.infile}")
        return 0
    except DtapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
