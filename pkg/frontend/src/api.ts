/** HTTP client for the control API, plus the event feed loop. */

import { UiState, applyEvent, ingestSnapshot } from "./state.js";
import type {
  EventsReply, Hit, Note, Share, Snapshot, Transfer, VenueInfo,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public code: string,
              detail: string) {
    super(`${code}: ${detail}`);
  }
}

export class ApiClient {
  constructor(public base: string) {}

  private async req<T>(method: string, path: string,
                       body?: unknown): Promise<T> {
    const res = await fetch(this.base + path, {
      method,
      headers: body === undefined ? {}
        : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const obj = await res.json();
    if (!res.ok) {
      throw new ApiError(res.status, String(obj?.error ?? "ERROR"),
                         String(obj?.detail ?? ""));
    }
    return obj as T;
  }

  snapshot(): Promise<Snapshot> {
    return this.req("GET", "/api/snapshot");
  }

  events(since: number, waitMs = 0): Promise<EventsReply> {
    return this.req(
      "GET", `/api/events?since=${since}&wait_ms=${waitMs}`);
  }

  async roster() {
    return (await this.req<{ roster: unknown[] }>(
      "GET", "/api/roster")).roster;
  }

  createVenue(name: string, visibility: string): Promise<VenueInfo> {
    return this.req("POST", "/api/venues", { name, visibility });
  }

  async postMessage(venueId: string, body: string): Promise<void> {
    await this.req("POST", `/api/venues/${venueId}/messages`, { body });
  }

  async invite(venueId: string, fingerprint: string): Promise<void> {
    await this.req("POST", `/api/venues/${venueId}/invite`,
                   { fingerprint });
  }

  async makePublic(venueId: string): Promise<void> {
    await this.req("POST", `/api/venues/${venueId}/public`, {});
  }

  joinVenue(venueId: string): Promise<VenueInfo> {
    return this.req("POST", `/api/venues/${venueId}/join`, {});
  }

  leaveNote(recipient: string, body: string): Promise<Note> {
    return this.req("POST", "/api/notes", { recipient, body });
  }

  addShare(path: string, tags: string[] = []): Promise<Share> {
    return this.req("POST", "/api/shares", { path, tags });
  }

  async search(text: string): Promise<string> {
    return (await this.req<{ query_id: string }>(
      "POST", "/api/search", { text })).query_id;
  }

  async hitsFor(queryId: string): Promise<Hit[]> {
    return (await this.req<{ hits: Hit[] }>(
      "GET", `/api/search/${queryId}/hits`)).hits;
  }

  fetchHit(hit: Hit): Promise<Transfer> {
    return this.req("POST", "/api/transfers", { hit });
  }

  async transfers(): Promise<Transfer[]> {
    return (await this.req<{ transfers: Transfer[] }>(
      "GET", "/api/transfers")).transfers;
  }
}

/** Pulls events into a UiState; a gap in the log forces a resync. */
export class EventFeed {
  constructor(private client: Pick<ApiClient, "events" | "snapshot">,
              private state: UiState) {}

  /** One poll round; returns how many events were applied. */
  async pump(waitMs = 0): Promise<number> {
    const reply = await this.client.events(this.state.seq, waitMs);
    if (reply.gap) {
      ingestSnapshot(this.state, await this.client.snapshot());
      return 0;
    }
    let applied = 0;
    for (const ev of reply.events) {
      if (ev.seq > this.state.seq) {
        applyEvent(this.state, ev);
        applied += 1;
      }
    }
    return applied;
  }
}
