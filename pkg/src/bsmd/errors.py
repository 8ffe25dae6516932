"""Exception hierarchy shared across the package."""


class BsmdError(Exception):
    """Base class for all protocol and simulator errors."""


class AuthFailure(BsmdError):
    """Authenticated decryption failed: tampered ciphertext or wrong key."""


class UnknownCategory(BsmdError):
    """Data category is not registered."""


class BadSignature(BsmdError):
    """Owner signature on a contract mutation did not verify."""


class RevokedPeer(BsmdError):
    """Peer is on the contract's deny list."""


class UnknownPeer(BsmdError):
    """DID was never bound to a peer by a handshake."""


class AccessDenied(BsmdError):
    """Contract refused the connection request."""

    def __init__(self, verdict: str, reason: str = ""):
        self.verdict = verdict
        self.reason = reason
        super().__init__(f"access denied ({verdict}){': ' + reason if reason else ''}")


class HandshakeFailure(BsmdError):
    """The two endpoints failed to agree on a session key."""


class NotGranted(BsmdError):
    """Transfer includes a category outside the receiver's grant."""


class ChannelClosed(BsmdError):
    """Operation on a connection that is not established."""


class InvalidSignature(BsmdError):
    """Ledger record signature does not verify under either connection DID."""


class PrivacyViolation(BsmdError):
    """Ledger record carries forbidden bytes (node id, master key, payload)."""


class NoQuorum(BsmdError):
    """Consensus could not gather 2f+1 matching votes within the view budget."""


class ScenarioError(BsmdError):
    """Scenario script failed validation; message carries a field diagnosis."""

    def __init__(self, field: str, problem: str):
        self.field = field
        self.problem = problem
        super().__init__(f"{field}: {problem}")
