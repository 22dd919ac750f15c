import { describe, expect, it } from "vitest";
import { ApiClient, ApiError } from "../src/api.js";
import type {
  CensusResponse,
  OrderAttemptResponse,
  ActionResponse,
} from "../src/types.js";
import { loadFixture } from "./helpers.js";

interface Recorded {
  url: string;
  method: string;
  body: unknown;
}

function clientFor(
  status: number,
  payload: unknown,
): { client: ApiClient; calls: Recorded[] } {
  const calls: Recorded[] = [];
  const fetchFn = async (url: string, init?: RequestInit) => {
    calls.push({
      url,
      method: init?.method ?? "GET",
      body: init?.body ? JSON.parse(init.body as string) : null,
    });
    return new Response(JSON.stringify(payload), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { client: new ApiClient("http://svc", fetchFn), calls };
}

describe("ApiClient", () => {
  it("fetches and types the census", async () => {
    const fixture = loadFixture<CensusResponse>("census.json");
    const { client, calls } = clientFor(200, fixture);
    const census = await client.census();
    expect(calls[0]?.url).toBe("http://svc/v1/encounters");
    expect(census.encounters.length).toBe(fixture.encounters.length);
    expect(census.encounters[0]?.encounter_id).toBe(
      fixture.encounters[0]?.encounter_id,
    );
  });

  it("posts the order attempt body the service expects", async () => {
    const fixture = loadFixture<OrderAttemptResponse>("attempt-displayed.json");
    const { client, calls } = clientFor(200, fixture);
    const response = await client.attemptOrder("enc-0005");
    expect(calls[0]).toMatchObject({
      url: "http://svc/v1/order-attempts",
      method: "POST",
      body: {
        encounter_id: "enc-0005",
        frequency: "daily_or_higher",
        clinician_id: "console",
      },
    });
    expect(calls[0]?.body).not.toHaveProperty("order_id");
    expect(response.displayed).toBe(fixture.displayed);
  });

  it("includes order_id when renewing an existing standing order", async () => {
    const fixture = loadFixture<OrderAttemptResponse>("attempt-displayed.json");
    const { client, calls } = clientFor(200, fixture);
    await client.attemptOrder("enc-0005", "daily_or_higher", "console", "order-enc-0005-0");
    expect(calls[0]?.body).toMatchObject({
      encounter_id: "enc-0005",
      order_id: "order-enc-0005-0",
    });
  });

  it("posts alert actions with the acknowledge reason", async () => {
    const fixture = loadFixture<ActionResponse>("action-reduce.json");
    const { client, calls } = clientFor(200, fixture);
    await client.alertAction("evt-000006", "acknowledged_continue", "More review needed");
    expect(calls[0]).toMatchObject({
      url: "http://svc/v1/alerts/evt-000006/action",
      method: "POST",
      body: {
        action: "acknowledged_continue",
        acknowledge_reason: "More review needed",
      },
    });
  });

  it("shapes non-2xx responses into ApiError with the server detail", async () => {
    const { client } = clientFor(409, { error: "order is not active" });
    await expect(client.alertAction("evt-1", "discontinued")).rejects.toThrow(
      ApiError,
    );
    try {
      await client.alertAction("evt-1", "discontinued");
    } catch (err) {
      const apiErr = err as ApiError;
      expect(apiErr.status).toBe(409);
      expect(apiErr.detail).toContain("order is not active");
    }
  });

  it("maps a missing prediction to null instead of throwing", async () => {
    const { client } = clientFor(404, { detail: "no prediction for enc-x" });
    expect(await client.prediction("enc-x")).toBeNull();
  });

  it("wraps transport failures with status 0", async () => {
    const failing = new ApiClient("http://svc", async () => {
      throw new TypeError("fetch failed");
    });
    try {
      await failing.census();
      expect.unreachable();
    } catch (err) {
      expect(err).toBeInstanceOf(ApiError);
      expect((err as ApiError).status).toBe(0);
    }
  });
});
