#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "fedmol/federation.hpp"
#include "fedmol/wire.hpp"

namespace fedmol {

/// Blocking stream socket carrying length-prefixed update frames:
/// u32 LE payload byte count, then an encode_update payload. No TLS; the
/// transport is plaintext by design and documented as such.
class TcpConnection {
  public:
    explicit TcpConnection(int fd) : fd_(fd) {}
    TcpConnection(TcpConnection&& other) noexcept;
    TcpConnection& operator=(TcpConnection&& other) noexcept;
    TcpConnection(const TcpConnection&) = delete;
    TcpConnection& operator=(const TcpConnection&) = delete;
    ~TcpConnection();

    static TcpConnection connect_to(const std::string& host, std::uint16_t port);

    void send_update(const ModelUpdate& update);
    /// Blocks for one frame. Returns false on clean end-of-stream (peer
    /// closed between frames).
    bool recv_update(ModelUpdate& out);

    void close();

  private:
    int fd_ = -1;
};

class TcpListener {
  public:
    /// Binds 127.0.0.1:port (port 0 picks a free one).
    explicit TcpListener(std::uint16_t port);
    ~TcpListener();
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;

    std::uint16_t port() const { return port_; }
    TcpConnection accept_one();

  private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

/// Aggregator-side proxy for a collaborator reached over TCP. The handshake
/// frame (sent by the collaborator on connect) carries its id.
class RemoteCollaborator : public Collaborator {
  public:
    explicit RemoteCollaborator(TcpConnection connection);

    const std::string& id() const override { return id_; }
    ModelUpdate execute_round(const ParamStore& denoiser, const ParamStore& regressor, int local_epochs) override;

  private:
    TcpConnection connection_;
    std::string id_;
};

/// Collaborator-side driver: connects, sends the handshake, then serves
/// broadcast frames until the aggregator closes the connection.
void serve_collaborator(const std::string& host, std::uint16_t port, LocalCollaborator& collaborator,
                        int local_epochs);

} // namespace fedmol
