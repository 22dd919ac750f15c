import type {
  ActionResponse,
  AlertAction,
  CensusResponse,
  LabsResponse,
  OrderAttemptResponse,
  OrdersResponse,
  PredictionResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
    readonly detail: string | null = null,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the documented /v1 surface; no interpretation,
 * no gating logic, just transport and error shaping. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new ApiError(`service unreachable: ${String(err)}`, 0);
    }
    const text = await response.text();
    let body: unknown = null;
    if (text) {
      try {
        body = JSON.parse(text);
      } catch {
        body = null;
      }
    }
    if (!response.ok) {
      const record = (body ?? {}) as Record<string, unknown>;
      const detail = record["detail"] ?? record["error"];
      const suffix = detail ? `: ${JSON.stringify(detail)}` : "";
      throw new ApiError(
        `${init?.method ?? "GET"} ${path} -> ${response.status}${suffix}`,
        response.status,
        detail == null ? null : JSON.stringify(detail),
      );
    }
    return body as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  census(asOf?: string): Promise<CensusResponse> {
    const query = asOf ? `?as_of=${encodeURIComponent(asOf)}` : "";
    return this.request(`/v1/encounters${query}`);
  }

  labs(encounterId: string, windowH = 72): Promise<LabsResponse> {
    return this.request(
      `/v1/encounters/${encodeURIComponent(encounterId)}/labs?window=${windowH}`,
    );
  }

  /** Latest prediction, or null when the service has none yet (404). */
  async prediction(encounterId: string): Promise<PredictionResponse | null> {
    try {
      return await this.request(
        `/v1/predictions/${encodeURIComponent(encounterId)}`,
      );
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) return null;
      throw err;
    }
  }

  orders(encounterId: string): Promise<OrdersResponse> {
    return this.request(
      `/v1/encounters/${encodeURIComponent(encounterId)}/orders`,
    );
  }

  attemptOrder(
    encounterId: string,
    frequency = "daily_or_higher",
    clinicianId = "console",
    orderId: string | null = null,
  ): Promise<OrderAttemptResponse> {
    const body: Record<string, string> = {
      encounter_id: encounterId,
      frequency,
      clinician_id: clinicianId,
    };
    // renewing an existing standing order: the service gates that order
    // instead of drafting a parallel one
    if (orderId !== null) body["order_id"] = orderId;
    return this.post("/v1/order-attempts", body);
  }

  alertAction(
    eventId: string,
    action: AlertAction,
    acknowledgeReason: string | null = null,
  ): Promise<ActionResponse> {
    return this.post(`/v1/alerts/${encodeURIComponent(eventId)}/action`, {
      action,
      acknowledge_reason: acknowledgeReason,
    });
  }
}
