"""Exception hierarchy shared by every engine module.

Each error exposes ``code``, the stable identifier used in reports and in
scenario ``expect_error`` clauses.
"""


class GovSimError(Exception):
    """Base class for all engine errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# ledger-core
class InsufficientSpendable(GovSimError):
    pass


class NonceMismatch(GovSimError):
    pass


class Frozen(GovSimError):
    pass


class ContractFrozen(GovSimError):
    pass


class Overflow(GovSimError):
    pass


class EmptyValidator(GovSimError):
    pass


class UnknownPayload(GovSimError):
    pass


class MalformedPayload(GovSimError):
    pass


class RuleViolation(GovSimError):
    def __init__(self, rule_id: str, detail: str = ""):
        super().__init__(f"{rule_id}: {detail}" if detail else rule_id)
        self.rule_id = rule_id


class UnknownRuleSet(GovSimError):
    pass


# tx-admission
class SenderKeyMismatch(GovSimError):
    pass


class UnknownScheme(GovSimError):
    pass


class MalformedTransaction(GovSimError):
    pass


class PoolFull(GovSimError):
    pass


# sharding
class ZeroShards(GovSimError):
    pass


class NoValidators(GovSimError):
    pass


class UnknownShard(GovSimError):
    pass


class SettlementPrecondition(GovSimError):
    pass


# governance-votes
class NotClosed(GovSimError):
    pass


class VotingClosed(GovSimError):
    pass


class UnknownProposal(GovSimError):
    pass


class DuplicateProposal(GovSimError):
    pass


class InvalidChoice(GovSimError):
    pass


class CycleDetected(GovSimError):
    pass


class SelfDelegation(GovSimError):
    pass


class DelegatedVoter(GovSimError):
    pass


class WrongMechanism(GovSimError):
    pass


class NotDictator(GovSimError):
    pass


class VetoWindowExpired(GovSimError):
    pass


class ProposalClosed(GovSimError):
    pass


class TokensNotIssued(GovSimError):
    pass


class RelayMismatch(GovSimError):
    pass


# controls
class ZeroAmount(GovSimError):
    pass


class NotYetUnlockable(GovSimError):
    pass


class AlreadyResolved(GovSimError):
    pass


class UnknownLock(GovSimError):
    pass


class BurnNotAuthorized(GovSimError):
    pass


class NotPrivileged(GovSimError):
    pass


# lifecycle
class NotBackwardCompatible(GovSimError):
    pass


class InsufficientAdoption(GovSimError):
    pass


class HeightBeyondTip(GovSimError):
    pass


class WrongForkKind(GovSimError):
    pass


class TeamStillActive(GovSimError):
    pass


# observability
class UnknownKind(GovSimError):
    pass


class UnknownAttribute(GovSimError):
    pass


class EmptyRange(GovSimError):
    pass


class InvalidPipeline(GovSimError):
    pass


# scenario-cli
class ScenarioError(GovSimError):
    """Base for parse-time scenario errors (CLI exit code 3)."""


class ScenarioSyntaxError(ScenarioError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line

    @property
    def code(self) -> str:
        return "SyntaxError"


class UnknownAction(ScenarioError):
    pass


class UndeclaredIdentity(ScenarioError):
    pass


class SchemaViolation(ScenarioError):
    pass
