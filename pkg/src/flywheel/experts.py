"""The seven specialized experts behind the router, and their judge-prompt aliases."""

from __future__ import annotations

from enum import Enum

from .errors import UnknownAlias


class ExpertId(str, Enum):
    """Canonical ids of the seven domain experts a query can be routed to."""

    FINANCIAL_INFO = "financial_info"
    IT_BENEFITS_HELP = "it_benefits_help"
    SHAREPOINT = "sharepoint"
    HOLIDAYS = "holidays"
    CAFE_MENU = "cafe_menu"
    PEOPLE = "people"
    POLICIES = "policies"


# Alias used when an expert is named inside a judge prompt. Total and
# injective over the canonical ids.
JUDGE_ALIASES: dict[ExpertId, str] = {
    ExpertId.FINANCIAL_INFO: "finance_expert",
    ExpertId.IT_BENEFITS_HELP: "it_benefits_help",
    ExpertId.SHAREPOINT: "nvinfo_sharepoint_expert",
    ExpertId.HOLIDAYS: "nvinfo_holiday_expert",
    ExpertId.CAFE_MENU: "nvinfo_cafe_expert",
    ExpertId.PEOPLE: "nvinfo_people_expert",
    ExpertId.POLICIES: "nvinfo_policies_expert",
}

_ALIAS_TO_EXPERT = {alias: expert for expert, alias in JUDGE_ALIASES.items()}


def judge_alias(expert: ExpertId) -> str:
    return JUDGE_ALIASES[expert]


def expert_for_alias(alias: str) -> ExpertId:
    try:
        return _ALIAS_TO_EXPERT[alias]
    except KeyError:
        raise UnknownAlias(f"unknown judge alias: {alias!r}") from None


def parse_expert(text: str) -> ExpertId | None:
    """Resolve free text to an expert id, accepting either canonical id or alias."""
    token = text.strip().lower()
    try:
        return ExpertId(token)
    except ValueError:
        return _ALIAS_TO_EXPERT.get(token)
