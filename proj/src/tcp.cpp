#include "fedmol/tcp.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <utility>

#include "fedmol/error.hpp"

namespace fedmol {

namespace {

constexpr std::size_t kMaxFrameBytes = 256u * 1024u * 1024u;

[[noreturn]] void fail_errno(const std::string& what) {
    fail(ErrorKind::CollaboratorFailure, what + ": " + std::strerror(errno));
}

void write_all(int fd, const std::uint8_t* data, std::size_t size) {
    std::size_t sent = 0;
    while (sent < size) {
        ssize_t n = ::send(fd, data + sent, size - sent, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail_errno("send");
        }
        sent += static_cast<std::size_t>(n);
    }
}

/// Returns false on clean EOF at the first byte; throws on mid-buffer EOF.
bool read_all(int fd, std::uint8_t* data, std::size_t size) {
    std::size_t got = 0;
    while (got < size) {
        ssize_t n = ::recv(fd, data + got, size - got, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail_errno("recv");
        }
        if (n == 0) {
            if (got == 0) return false;
            fail(ErrorKind::TruncatedPayload, "connection closed mid-frame");
        }
        got += static_cast<std::size_t>(n);
    }
    return true;
}

} // namespace

TcpConnection::TcpConnection(TcpConnection&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}

TcpConnection& TcpConnection::operator=(TcpConnection&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
}

TcpConnection::~TcpConnection() { close(); }

void TcpConnection::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

TcpConnection TcpConnection::connect_to(const std::string& host, std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) fail_errno("socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        fail(ErrorKind::CollaboratorFailure, "bad host address '" + host + "'");
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
        int saved = errno;
        ::close(fd);
        errno = saved;
        fail_errno("connect");
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpConnection(fd);
}

void TcpConnection::send_update(const ModelUpdate& update) {
    if (fd_ < 0) fail(ErrorKind::CollaboratorFailure, "send on closed connection");
    std::vector<std::uint8_t> payload = encode_update(update);
    std::uint8_t header[4];
    std::uint32_t len = static_cast<std::uint32_t>(payload.size());
    for (int i = 0; i < 4; ++i) header[i] = static_cast<std::uint8_t>((len >> (8 * i)) & 0xff);
    write_all(fd_, header, 4);
    write_all(fd_, payload.data(), payload.size());
}

bool TcpConnection::recv_update(ModelUpdate& out) {
    if (fd_ < 0) fail(ErrorKind::CollaboratorFailure, "recv on closed connection");
    std::uint8_t header[4];
    if (!read_all(fd_, header, 4)) return false;
    std::uint32_t len = 0;
    for (int i = 3; i >= 0; --i) len = (len << 8) | header[i];
    if (len > kMaxFrameBytes) fail(ErrorKind::TruncatedPayload, "frame length exceeds limit");
    std::vector<std::uint8_t> payload(len);
    if (len > 0 && !read_all(fd_, payload.data(), len))
        fail(ErrorKind::TruncatedPayload, "connection closed mid-frame");
    out = decode_update(payload);
    return true;
}

TcpListener::TcpListener(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail_errno("socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) fail_errno("bind");
    if (::listen(fd_, 16) < 0) fail_errno("listen");
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len) < 0) fail_errno("getsockname");
    port_ = ntohs(bound.sin_port);
}

TcpListener::~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
}

TcpConnection TcpListener::accept_one() {
    int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) fail_errno("accept");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpConnection(fd);
}

RemoteCollaborator::RemoteCollaborator(TcpConnection connection) : connection_(std::move(connection)) {
    ModelUpdate handshake;
    if (!connection_.recv_update(handshake))
        fail(ErrorKind::CollaboratorFailure, "collaborator disconnected before handshake");
    // decode_update already rejected unknown protocol versions.
    if (handshake.collaborator_id.empty())
        fail(ErrorKind::CollaboratorFailure, "handshake carried an empty collaborator id");
    id_ = handshake.collaborator_id;
}

ModelUpdate RemoteCollaborator::execute_round(const ParamStore& denoiser, const ParamStore& regressor,
                                              int local_epochs) {
    ModelUpdate broadcast;
    broadcast.collaborator_id = "aggregator";
    broadcast.train_sample_count = static_cast<std::uint64_t>(local_epochs);
    broadcast.denoiser_params = denoiser;
    broadcast.regressor_params = regressor;
    connection_.send_update(broadcast);
    ModelUpdate reply;
    if (!connection_.recv_update(reply))
        fail(ErrorKind::CollaboratorFailure, "collaborator '" + id_ + "' disconnected mid-round");
    return reply;
}

void serve_collaborator(const std::string& host, std::uint16_t port, LocalCollaborator& collaborator,
                        int local_epochs) {
    TcpConnection conn = TcpConnection::connect_to(host, port);
    ModelUpdate handshake;
    handshake.collaborator_id = collaborator.id();
    handshake.train_sample_count = collaborator.trainer().train_sample_count();
    conn.send_update(handshake);

    ModelUpdate broadcast;
    while (conn.recv_update(broadcast)) {
        int epochs = static_cast<int>(broadcast.train_sample_count);
        if (epochs < 1) epochs = local_epochs;
        ModelUpdate reply = collaborator.execute_round(broadcast.denoiser_params, broadcast.regressor_params, epochs);
        conn.send_update(reply);
    }
}

} // namespace fedmol
